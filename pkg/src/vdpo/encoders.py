"""Vision and text encoders, and the mini-CLIP pretraining that produces
the frozen pair used by every later stage."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from . import data as D
from .layers import Module, dense_init, one_hot
from .numerics import (
    Adam,
    NonFiniteError,
    Rng,
    Tensor,
    as_tensor,
    concat,
    exp,
    l2_normalize,
    softmax_cross_entropy,
    take,
    tanh,
)

log = logging.getLogger(__name__)

EMBED_DIM = 32
TEMPERATURE = 0.07


class EncoderInputError(ValueError):
    pass


def _conv_indices(size):
    """Gather table for a 3x3, stride-2, zero-padded convolution over a
    flattened ``size x size`` image with one extra zero pixel appended at
    index ``size * size``."""
    zero = size * size
    rows = []
    for oy in range(0, size, 2):
        for ox in range(0, size, 2):
            patch = []
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    y, x = oy + dy, ox + dx
                    patch.append(y * size + x if 0 <= y < size and 0 <= x < size else zero)
            rows.append(patch)
    return np.array(rows, dtype=np.int64)


class VisionEncoder(Module):
    """3x3 stride-2 conv (tanh) -> flatten -> linear -> L2 normalize."""

    def __init__(self, rng, image_size=D.IMAGE_SIZE, channels=8, dim=EMBED_DIM):
        super().__init__()
        self.image_size = image_size
        self.channels = channels
        self.dim = dim
        self._idx = _conv_indices(image_size)
        n_pos = self._idx.shape[0]
        self.add_param("conv_w", rng.normal((9, channels), scale=1.0 / 3.0))
        self.add_param("conv_b", np.zeros(channels))
        # small projection + unit-scale bias: every input starts near the
        # same direction, so initial in-batch similarities are ~uniform
        self.add_param("proj_w", dense_init(rng, n_pos * channels, dim, gain=0.1))
        self.add_param("proj_b", rng.normal(dim))

    def __call__(self, images):
        x = as_tensor(images)
        n = x.shape[0]
        side = self.image_size
        if x.data.min() < 0 or x.data.max() > 1:
            raise EncoderInputError("image pixels must lie in [0, 1]")
        x = x.reshape(n, side * side)
        x = concat([x, Tensor(np.zeros((n, 1)))], axis=1)
        patches = take(x, self._idx, axis=1)  # (n, P, 9)
        n_pos = self._idx.shape[0]
        p = self.params
        h = tanh(patches.reshape(n * n_pos, 9) @ p["conv_w"] + p["conv_b"])
        h = h.reshape(n, n_pos * self.channels)
        return l2_normalize(h @ p["proj_w"] + p["proj_b"], axis=1)


class TextEncoder(Module):
    """Token embeddings -> position-weighted mean over non-PAD tokens ->
    linear -> L2 normalize.

    Works on token *distributions* (N, L, V) so that the same map accepts
    hard one-hot captions and the soft relaxed prompts used in training.
    Position ``i`` gets weight ``exp(a_i) * (1 - P(token_i = PAD))``.
    """

    def __init__(self, rng, vocab=D.VOCAB_SIZE, dim=EMBED_DIM, max_positions=16):
        super().__init__()
        self.vocab = vocab
        self.dim = dim
        self.max_positions = max_positions
        self.add_param("embed", rng.normal((vocab, dim)))
        self.add_param("pos_logw", np.zeros(max_positions))
        self.add_param("proj_w", dense_init(rng, dim, dim, gain=0.1))
        self.add_param("proj_b", rng.normal(dim))

    def encode_probs(self, probs):
        probs = as_tensor(probs)
        n, length, vocab = probs.shape
        if vocab != self.vocab or length > self.max_positions:
            raise EncoderInputError(f"token distribution shape {probs.shape} not supported")
        p = self.params
        emb = (probs.reshape(n * length, vocab) @ p["embed"]).reshape(n, length, self.dim)
        not_pad = 1.0 - probs[:, :, D.PAD]
        w = not_pad * exp(p["pos_logw"][:length])
        pooled = (emb * w.reshape(n, length, 1)).sum(axis=1) / w.sum(axis=1, keepdims=True)
        return l2_normalize(pooled @ p["proj_w"] + p["proj_b"], axis=1)

    def __call__(self, token_ids):
        ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
        if ids.min() < 0 or ids.max() >= self.vocab:
            raise EncoderInputError("unknown token id")
        if np.any(ids[:, 0] != D.BOS):
            raise EncoderInputError("token sequences must start with BOS")
        return self.encode_probs(one_hot(ids, self.vocab))


@dataclass
class EncoderPair:
    vision: VisionEncoder
    text: TextEncoder

    def freeze(self):
        self.vision.freeze()
        self.text.freeze()
        return self

    @property
    def frozen(self):
        return self.vision.frozen and self.text.frozen


def build_encoders(seed, image_size=D.IMAGE_SIZE, vocab=D.VOCAB_SIZE, dim=EMBED_DIM, channels=8):
    rng = Rng(seed, 101)
    return EncoderPair(
        VisionEncoder(rng.child(0), image_size, channels, dim),
        TextEncoder(rng.child(1), vocab, dim),
    )


def clip_loss(img_emb, txt_emb, temperature=TEMPERATURE):
    """Symmetric in-batch contrastive loss over cosine-similarity logits.
    Inputs are unit-norm, so the dot product is the cosine."""
    logits = (img_emb @ txt_emb.T) * (1.0 / temperature)
    labels = np.arange(img_emb.shape[0])
    return 0.5 * (softmax_cross_entropy(logits, labels) + softmax_cross_entropy(logits.T, labels))


def pretrain_encoders(
    dataset,
    epochs=30,
    lr=3e-3,
    seed=0,
    batch_size=32,
    temperature=TEMPERATURE,
    image_size=D.IMAGE_SIZE,
    history=None,
    with_conditions=True,
):
    """Train a fresh encoder pair on (image, caption) pairs and freeze it.

    Each target render is paired with its caption and, with
    ``with_conditions``, so is the condition image, so edge/sketch maps of
    a scene land near the same caption as the clean render.
    """
    pair = build_encoders(seed, image_size=image_size)
    images = np.stack([s.target for s in dataset])
    captions = np.array([s.caption for s in dataset])
    if with_conditions:
        images = np.concatenate([images, np.stack([s.condition for s in dataset])])
        captions = np.concatenate([captions, captions])
    params = pair.vision.parameters() + pair.text.parameters()
    opt = Adam(params, lr=lr)
    order_rng = Rng(seed, 102)
    n = len(images)
    for epoch in range(epochs):
        order = order_rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            loss = clip_loss(pair.vision(images[idx]), pair.text(captions[idx]), temperature)
            if not math.isfinite(loss.item()):
                raise NonFiniteError(f"pretraining diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            count += 1
        if history is not None:
            history.append(total / max(count, 1))
        log.debug("pretrain epoch %d loss %.4f", epoch, total / max(count, 1))
    return pair.freeze()


def retrieval_accuracy(query_emb, candidate_emb, query_keys, candidate_keys):
    """Fraction of queries whose highest-cosine candidate has the same key.
    Embeddings are unit-norm row arrays."""
    sims = np.asarray(query_emb) @ np.asarray(candidate_emb).T
    best = sims.argmax(axis=1)
    hits = [query_keys[i] == candidate_keys[j] for i, j in enumerate(best)]
    return float(np.mean(hits))
