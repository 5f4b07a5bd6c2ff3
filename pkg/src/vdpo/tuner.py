"""Prompt tuner: visual embedding -> unit vector in the text-embedding space."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np

from .encoders import retrieval_accuracy
from .layers import Module, dense_init
from .numerics import (
    Adam,
    DegenerateInputError,
    NonFiniteError,
    Rng,
    ShapeError,
    Tensor,
    as_tensor,
    l2_normalize,
    softmax_cross_entropy,
    tanh,
)

log = logging.getLogger(__name__)


@dataclass
class Stage1Config:
    temperature: float = 0.07
    batch_size: int = 16
    epochs: int = 20
    lr: float = 3e-3
    seed: int = 0

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.batch_size < 2:
            raise ValueError("batch size must be at least 2")


class PromptTuner(Module):
    """MLP d_v -> hidden (tanh) -> d_t, output L2-normalized."""

    def __init__(self, rng, d_in=32, hidden=64, d_out=32):
        super().__init__()
        self.add_param("w1", dense_init(rng, d_in, hidden))
        self.add_param("b1", np.zeros(hidden))
        self.add_param("w2", dense_init(rng, hidden, d_out))
        self.add_param("b2", np.zeros(d_out))

    def __call__(self, v):
        p = self.params
        h = tanh(as_tensor(v) @ p["w1"] + p["b1"])
        return l2_normalize(h @ p["w2"] + p["b2"], axis=1)


class IdentityTuner(Module):
    """Ablation stand-in: p = v (valid because d_v == d_t)."""

    def __call__(self, v):
        return as_tensor(v)


def aggregate_context(vs):
    """Renormalized mean of k visual embeddings (rows or a list of rows).

    Accepts a list of (d,) arrays / tensors for one query, or a Tensor of
    shape (k, d). Order-invariant by construction.
    """
    if isinstance(vs, Tensor):
        stacked = vs
    else:
        if len(vs) == 0:
            raise ValueError("aggregate_context needs at least one embedding")
        stacked = Tensor(np.stack([np.asarray(getattr(v, "data", v)).reshape(-1) for v in vs]))
    if stacked.shape[0] == 0:
        raise ValueError("aggregate_context needs at least one embedding")
    mean = stacked.mean(axis=0, keepdims=True)
    if np.linalg.norm(mean.data) < 1e-12:
        raise DegenerateInputError("context embeddings cancel to zero")
    return l2_normalize(mean, axis=1)


def contrastive_loss(prompts, texts, temperature=0.07):
    """Mean over rows of -log softmax_j(sim(p_i, t_j) / tau)[i].

    Rows are unit-norm, so sim is the dot product. Negatives are the other
    rows of the batch.
    """
    prompts, texts = as_tensor(prompts), as_tensor(texts)
    if prompts.shape != texts.shape or prompts.ndim != 2:
        raise ShapeError(f"batch shapes differ: {prompts.shape} vs {texts.shape}")
    n = prompts.shape[0]
    if n < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    logits = (prompts @ texts.T) * (1.0 / temperature)
    return softmax_cross_entropy(logits, np.arange(n))


def train_stage1(tuner, encoders, dataset, config: Stage1Config, metrics_path=None, eval_set=None):
    """Fit the tuner so tune(f_v(target)) retrieves f_t(caption).

    Encoders must be frozen; only tuner parameters receive updates.
    Visual and text embeddings are fixed, so they are computed once.
    Returns the per-epoch mean losses.
    """
    if not encoders.frozen:
        raise ValueError("stage 1 requires frozen encoders")
    vis = encoders.vision(np.stack([s.target for s in dataset])).data
    txt = encoders.text(np.array([s.caption for s in dataset])).data
    if eval_set is not None:
        eval_vis = encoders.vision(np.stack([s.target for s in eval_set])).data
        eval_txt = encoders.text(np.array([s.caption for s in eval_set])).data
        eval_keys = [s.caption for s in eval_set]

    opt = Adam(tuner.parameters(), lr=config.lr)
    rng = Rng(config.seed, 201)
    n, bs = len(dataset), config.batch_size
    losses, rows = [], []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n - bs + 1, bs):
            idx = order[start : start + bs]
            loss = contrastive_loss(tuner(vis[idx]), Tensor(txt[idx]), config.temperature)
            if not math.isfinite(loss.item()):
                raise NonFiniteError(f"stage 1 diverged at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item()
            count += 1
        losses.append(total / max(count, 1))
        acc = ""
        if eval_set is not None:
            acc = prompt_retrieval_accuracy(tuner, eval_vis, eval_txt, eval_keys)
        rows.append((epoch, losses[-1], acc))
        log.debug("stage1 epoch %d loss %.4f acc %s", epoch, losses[-1], acc)
    if metrics_path is not None:
        with open(metrics_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss", "retrieval_accuracy"])
            w.writerows(rows)
    return losses


def prompt_retrieval_accuracy(tuner, vis, txt, keys):
    """Top-1 prompt -> caption retrieval; candidates are all captions of
    the evaluation set (duplicates count as hits)."""
    prompts = tuner(vis).data
    return retrieval_accuracy(prompts, txt, keys, keys)
