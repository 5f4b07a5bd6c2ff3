"""Recurrent instruction decoder: prompt embedding -> token sequence.

Training uses a soft rollout in which each step feeds the *expected* token
embedding of the previous step's distribution back in, and probability
mass that already emitted EOS is routed to PAD. Feeding one-hot argmax
tokens through the same recurrence gives greedy decoding, so the hard and
soft paths share one set of equations.
"""

from __future__ import annotations

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
    softmax,
    softmax_cross_entropy,
    tanh,
)

MAX_LEN = D.CAPTION_LEN


class InstructionDecoder(Module):
    def __init__(self, rng, vocab=D.VOCAB_SIZE, d_prompt=32, d_token=32, hidden=64, max_len=MAX_LEN):
        super().__init__()
        self.vocab = vocab
        self.max_len = max_len
        self.add_param("embed", rng.normal((vocab, d_token), scale=0.5))
        self.add_param("w_in", dense_init(rng, d_token + d_prompt, hidden))
        self.add_param("w_h", dense_init(rng, hidden, hidden, gain=0.5))
        self.add_param("b_h", np.zeros(hidden))
        self.add_param("w_init", dense_init(rng, d_prompt, hidden))
        self.add_param("b_init", np.zeros(hidden))
        self.add_param("w_out", dense_init(rng, hidden, vocab, gain=0.5))
        self.add_param("b_out", np.zeros(vocab))

    def _init_state(self, p):
        return tanh(p @ self.params["w_init"] + self.params["b_init"])

    def _step(self, token_dist, p, h):
        """One recurrence step from a (N, V) token distribution."""
        w = self.params
        x = token_dist @ w["embed"]
        h = tanh(concat([x, p], axis=1) @ w["w_in"] + h @ w["w_h"] + w["b_h"])
        return h, h @ w["w_out"] + w["b_out"]

    # -- training paths ----------------------------------------------------------

    def teacher_forced_logits(self, p, captions):
        """Logits for positions 1..L-1 given ground-truth prefixes; rows are
        position-major: row ``t * N + n`` predicts ``captions[n, t + 1]``."""
        p = as_tensor(p)
        captions = np.asarray(captions, dtype=np.int64)
        h = self._init_state(p)
        out = []
        for t in range(captions.shape[1] - 1):
            h, logits = self._step(Tensor(one_hot(captions[:, t], self.vocab)), p, h)
            out.append(logits)
        return concat(out, axis=0)

    def teacher_forced_loss(self, p, captions):
        """Mean token cross-entropy over non-PAD target positions."""
        captions = np.atleast_2d(np.asarray(captions, dtype=np.int64))
        targets = captions[:, 1:].T.reshape(-1)
        mask = targets != D.PAD
        if not mask.any():
            raise ValueError("caption has no non-PAD tokens to predict")
        logits = self.teacher_forced_logits(p, captions)
        return softmax_cross_entropy(logits, targets, mask)

    def soft_decode(self, p):
        """Differentiable rollout; returns token distributions (N, L, V)
        with position 0 fixed to BOS."""
        p = as_tensor(p)
        n = p.shape[0]
        bos = Tensor(one_hot(np.full(n, D.BOS), self.vocab))
        pad = Tensor(one_hot(np.full(n, D.PAD), self.vocab))
        h = self._init_state(p)
        prev = bos
        alive = Tensor(np.ones((n, 1)))
        dists = [bos]
        for _ in range(1, self.max_len):
            h, logits = self._step(prev, p, h)
            q = softmax(logits, axis=1)
            eff = alive * q + (1.0 - alive) * pad
            alive = alive * (1.0 - q[:, D.EOS : D.EOS + 1])
            dists.append(eff)
            prev = eff
        return concat([d.reshape(n, 1, self.vocab) for d in dists], axis=1)

    # -- inference ---------------------------------------------------------------

    def generate(self, p, mode="greedy", rng=None, temperature=1.0):
        """Hard decode for a batch of prompts (N, d); returns an int array
        (N, max_len). ``mode`` is "greedy" or "sampled" (needs ``rng``)."""
        if mode not in ("greedy", "sampled"):
            raise ValueError(f"unknown decode mode {mode!r}")
        if mode == "sampled" and rng is None:
            raise ValueError("sampled decoding needs an rng")
        p = Tensor(np.atleast_2d(getattr(p, "data", p)))
        n = p.shape[0]
        ids = np.full((n, self.max_len), D.PAD, dtype=np.int64)
        ids[:, 0] = D.BOS
        done = np.zeros(n, dtype=bool)
        h = self._init_state(p)
        for t in range(1, self.max_len):
            h, logits = self._step(Tensor(one_hot(ids[:, t - 1], self.vocab)), p, h)
            if mode == "greedy":
                tok = logits.data.argmax(axis=1)
            else:
                z = logits.data / temperature
                z = np.exp(z - z.max(axis=1, keepdims=True))
                z /= z.sum(axis=1, keepdims=True)
                tok = np.array([rng.choice(self.vocab, p=row) for row in z])
            tok = np.where(done, D.PAD, tok)
            ids[:, t] = tok
            done |= tok == D.EOS
        return ids


def pretrain_decoder(decoder, text, captions, epochs=10, lr=3e-3, seed=0, batch_size=32, noise=0.1):
    """Warm start: teach the decoder to read captions back out of the frozen
    text space, p = normalize(f_t(caption) + noise). Stands in for a
    language model that already maps text embeddings to text. Returns the
    per-epoch mean loss."""
    captions = np.asarray(captions, dtype=np.int64)
    feats = text(captions).data
    opt = Adam(decoder.parameters(), lr=lr)
    rng = Rng(seed, 201)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(captions))
        total, count = 0.0, 0
        for start in range(0, len(captions) - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            p = feats[idx] + noise * rng.normal((len(idx), feats.shape[1]))
            p /= np.linalg.norm(p, axis=1, keepdims=True)
            loss = decoder.teacher_forced_loss(Tensor(p), captions[idx])
            if not np.isfinite(loss.item()):
                raise NonFiniteError(f"decoder warm start diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            count += 1
        history.append(total / max(count, 1))
    return history


def check_token_sequence(ids, vocab=D.VOCAB_SIZE, max_len=MAX_LEN):
    """Raise ValueError unless ``ids`` is a valid generated sequence."""
    ids = [int(i) for i in ids]
    if not 1 <= len(ids) <= max_len:
        raise ValueError("sequence length out of range")
    if ids[0] != D.BOS:
        raise ValueError("sequence must start with BOS")
    if any(not 0 <= i < vocab for i in ids):
        raise ValueError("token id out of vocabulary")
    if D.EOS in ids:
        tail = ids[ids.index(D.EOS) + 1 :]
        if any(i != D.PAD for i in tail):
            raise ValueError("non-PAD token after EOS")


def export_prompts(sequences, path):
    """One detokenized prompt per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for ids in sequences:
            fh.write(D.detokenize(ids) + "\n")
