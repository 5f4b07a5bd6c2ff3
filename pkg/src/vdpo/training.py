"""Multi-objective losses, curriculum and the stage-2 joint fine-tuning loop.

Training-time relaxations (also summarized in the README):

* The generated prompt is discrete. During training the decoder runs a
  soft rollout and f_t consumes the token distributions, so the condition
  c = f_t(T) and the alignment term are differentiable. Evaluation uses
  hard greedy tokens.
* The generated image in the semantic and fidelity terms is the one-step
  x0 estimate at the sampled timestep, not a full ancestral sample.
* Batch-moment distance in f_v space stands in for FID inside the loss;
  the real FID is computed at evaluation.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass

import numpy as np

from . import data as D
from .diffusion import denoising_terms, draw_noise, x0_estimate
from .numerics import Adam, NonFiniteError, Rng, ShapeError, Tensor, abs_, as_tensor, squared_norm

log = logging.getLogger(__name__)

COMPONENTS = ("sem", "gen", "align", "caption", "diffusion")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, epoch, last_good):
        super().__init__(message)
        self.epoch = epoch
        self.last_good = last_good


@dataclass
class CurriculumSchedule:
    """Level 1 before epoch e1, level 2 before e2, level 3 after."""

    e1: int = 2
    e2: int = 5

    def __post_init__(self):
        if not 0 <= self.e1 <= self.e2:
            raise ValueError("need 0 <= e1 <= e2")

    def level(self, epoch):
        if epoch < self.e1:
            return 1
        if epoch < self.e2:
            return 2
        return 3


# -- loss terms ------------------------------------------------------------------


def loss_sem(v, images, vision):
    """Mean over the batch of ||v - f_v(I')||^2."""
    return semantic_distance(v, vision(images))


def semantic_distance(v, feats):
    return squared_norm(as_tensor(v) - feats, axis=1).mean()


def moment_gap(feats_a, feats_b):
    """||mean_a - mean_b||^2 + ||var_a - var_b||_1 (unbiased variances)."""
    feats_a, feats_b = as_tensor(feats_a), as_tensor(feats_b)
    if feats_a.shape[0] < 2 or feats_b.shape[0] < 2:
        raise ShapeError("moment gap needs batches of at least 2")
    if feats_a.shape[1] != feats_b.shape[1]:
        raise ShapeError("feature dimensions differ")

    def moments(f):
        mu = f.mean(axis=0, keepdims=True)
        var = ((f - mu) * (f - mu)).sum(axis=0) * (1.0 / (f.shape[0] - 1))
        return mu, var

    mu_a, var_a = moments(feats_a)
    mu_b, var_b = moments(feats_b)
    return ((mu_a - mu_b) * (mu_a - mu_b)).sum() + abs_(var_a - var_b).sum()


def loss_gen_surrogate(generated, real, vision):
    """Training-time stand-in for FID: moment gap of f_v features."""
    return moment_gap(vision(generated), vision(real))


def loss_align(p, token_dists, text):
    """Mean ||p - f_t(T)||^2; ``token_dists`` are (N, L, V) distributions
    or an int array of token ids."""
    arr = getattr(token_dists, "data", token_dists)
    if np.asarray(arr).ndim == 2:
        ft = text(np.asarray(arr, dtype=np.int64))
    else:
        ft = text.encode_probs(token_dists)
    return squared_norm(as_tensor(p) - ft, axis=1).mean()


def total_loss(weights, components):
    """Weighted sum of the components named in ``COMPONENTS``.

    ``weights`` maps component name -> weight. A term with weight 0 is left
    out of the graph entirely, so it is logged but never backpropagated.
    """
    total = None
    for name in COMPONENTS:
        if name not in components:
            continue
        value = components[name]
        if not math.isfinite(value.item()):
            raise NonFiniteError(f"loss component {name} is not finite")
        w = float(weights.get(name, 0.0))
        if w == 0.0:
            continue
        term = value if w == 1.0 else value * w
        total = term if total is None else total + term
    if total is None:
        return Tensor(0.0)
    return total


def weights_dict(weights, variant="full"):
    w = {name: float(getattr(weights, name)) for name in COMPONENTS}
    if variant == "no_dual_modality":
        w["align"] = 0.0
    return w


def stage2_components(pipe, conditions, targets, captions, t, eps):
    """All stage-2 loss terms for one batch at fixed (t, eps).

    ``conditions``/``targets`` are (N, s*s) arrays, ``captions`` (N, L) ids.
    """
    enc = pipe.encoders
    v = enc.vision(conditions)
    p = pipe.tuner(v)
    dists = pipe.decoder.soft_decode(p)
    c = enc.text.encode_probs(dists)
    # The auxiliary denoising loss is conditioned on the ground-truth
    # caption, a constant for theta and phi. Through the generated c its
    # 1/sqrt(1 - abar) gain near t = 1 swamps the decoder.
    l_diff, x_t, _ = denoising_terms(pipe.denoiser, targets, enc.text(captions), t, eps)
    x0_hat = x0_estimate(pipe.denoiser, x_t, t, c)
    gen_feats = enc.vision(x0_hat)
    real_feats = enc.vision(targets)
    return {
        "sem": semantic_distance(v, gen_feats),
        "gen": moment_gap(gen_feats, real_feats),
        "align": squared_norm(p - c, axis=1).mean(),
        "caption": pipe.decoder.teacher_forced_loss(p, captions),
        "diffusion": l_diff,
    }


# -- stage 2 -----------------------------------------------------------------------


def stage2_batches(task, samples_per_epoch, batch_size, epochs, curriculum, seed):
    """Deterministic batch stream: yields (epoch, level, conditions, targets,
    captions). Each epoch draws a fresh dataset at the curriculum level."""
    order_rng = Rng(seed, 302)
    for epoch in range(epochs):
        level = curriculum.level(epoch)
        ds = D.make_dataset(samples_per_epoch, seed * 1000 + epoch, level, task)
        cond = np.stack([s.condition.reshape(-1) for s in ds])
        tgt = np.stack([s.target.reshape(-1) for s in ds])
        caps = np.array([s.caption for s in ds])
        order = order_rng.permutation(len(ds))
        for start in range(0, len(ds) - batch_size + 1, batch_size):
            idx = order[start : start + batch_size]
            yield epoch, level, cond[idx], tgt[idx], caps[idx]


def _snapshot(pipe):
    return {k: p.data.copy() for k, p in pipe.trainable().items()}


def _restore(pipe, snap):
    for k, p in pipe.trainable().items():
        p.data = snap[k].copy()


def train_stage2(
    pipe,
    weights,
    curriculum,
    epochs,
    seed,
    task="sketch2img",
    samples_per_epoch=800,
    batch_size=32,
    lr=1e-4,
    log_path=None,
    batches=None,
    lr_decay="linear",
):
    """Joint fine-tuning of tuner, decoder and denoiser.

    ``weights`` is a dict over ``COMPONENTS`` (see :func:`weights_dict`).
    Returns a list of per-epoch dicts (mean of each component, total,
    level, wall time) and stores per-step diffusion losses under
    ``pipe.stage2_step_losses``. ``lr_decay="linear"`` lowers the learning
    rate linearly per epoch, from ``lr`` to ``lr / epochs``. On divergence, parameters are restored to
    the end of the last complete epoch and TrainingDiverged is raised.
    """
    if not pipe.encoders.frozen:
        raise ValueError("stage 2 requires frozen encoders")
    params = list(pipe.trainable().values())
    opt = Adam(params, lr=lr)
    noise_rng = Rng(seed, 301)
    if batches is None:
        batches = stage2_batches(task, samples_per_epoch, batch_size, epochs, curriculum, seed)

    history, step_totals = [], []
    last_good = _snapshot(pipe)
    acc, count, current, level, t0 = None, 0, 0, 1, time.perf_counter()

    def close_epoch():
        row = {name: acc[name] / count for name in acc}
        row.update(epoch=current, level=level, wall_time=time.perf_counter() - t0)
        history.append(row)

    for epoch, lvl, cond, tgt, caps in batches:
        if epoch != current and acc is not None:
            close_epoch()
            last_good = _snapshot(pipe)
            acc, count, t0 = None, 0, time.perf_counter()
        current, level = epoch, lvl
        if lr_decay == "linear":
            opt.lr = lr * (1.0 - epoch / epochs)
        t, eps = draw_noise(noise_rng, len(tgt), tgt.shape[1], pipe.schedule.steps)
        try:
            comps = stage2_components(pipe, cond, tgt, caps, t, eps)
            loss = total_loss(weights, comps)
            opt.zero_grad()
            if loss.requires_grad:
                loss.backward()
            opt.step()
        except NonFiniteError as exc:
            _restore(pipe, last_good)
            raise TrainingDiverged(f"stage 2 diverged in epoch {epoch}: {exc}", epoch, last_good) from None
        values = {name: comps[name].item() for name in COMPONENTS}
        values["total"] = loss.item()
        step_totals.append(values)
        if acc is None:
            acc = dict.fromkeys(values, 0.0)
        for k, val in values.items():
            acc[k] += val
        count += 1
    if acc is not None:
        close_epoch()
    pipe.stage2_step_losses = step_totals
    pipe.stage = "stage2"
    if log_path is not None:
        write_training_log(history, log_path)
    return history


def write_training_log(history, path):
    cols = ["epoch", "level", "total", *COMPONENTS, "wall_time"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in history:
            w.writerow([row[c] for c in cols])
