"""Stage orchestration driven by a RunConfig (used by the CLI and tests)."""

from __future__ import annotations

import logging

import numpy as np

from . import data as D
from .config import RunConfig
from .diffusion import train_denoiser
from .encoders import pretrain_encoders
from .numerics import Rng
from .instructor import pretrain_decoder
from .metrics import evaluate_pipeline
from .pipeline import VARIANTS, build_pipeline
from .training import CurriculumSchedule, train_stage2, weights_dict
from .tuner import Stage1Config, train_stage1

log = logging.getLogger(__name__)


def eval_set(cfg, n=None):
    return D.make_dataset(n or cfg.eval.n_samples, cfg.data.seed + 7919, 3, cfg.task)


def run_pretrain(cfg):
    """Frozen encoder pair plus a warm-started decoder, packaged as a
    pipeline at stage "pretrain" (tuner and denoiser untrained)."""
    ds = D.make_dataset(cfg.data.n_pretrain, cfg.data.seed, 3, cfg.task)
    p = cfg.pretrain
    encoders = pretrain_encoders(ds, p.epochs, p.lr, cfg.seed, p.batch_size, p.temperature)
    pipe = build_pipeline(cfg.dims, cfg.diffusion, cfg.seed, cfg.variant, encoders=encoders)
    pretrain_decoder(
        pipe.decoder,
        encoders.text,
        [s.caption for s in ds],
        p.decoder_epochs,
        p.decoder_lr,
        cfg.seed,
        p.batch_size,
        p.decoder_noise,
    )
    dc = cfg.diffusion
    if dc.pretrain_steps:
        # text-to-image warm start on clean renders and their captions
        targets = np.stack([s.target.reshape(-1) for s in ds])
        conds = encoders.text(np.array([s.caption for s in ds])).data
        train_denoiser(
            pipe.denoiser, targets, conds, dc.pretrain_steps, Rng(cfg.seed, 103), 32, dc.pretrain_lr, decay=True
        )
    pipe.stage = "pretrain"
    return pipe


def new_pipeline(cfg, base, variant=None):
    """Fresh tuner/denoiser for ``variant`` on top of a pretrained base
    (shared encoders, copied decoder weights)."""
    pipe = build_pipeline(cfg.dims, cfg.diffusion, cfg.seed, variant or cfg.variant, encoders=base.encoders)
    pipe.decoder.load_state(base.decoder.state())
    pipe.denoiser.load_state(base.denoiser.state())
    pipe.stage = "pretrain"
    return pipe


def run_stage1(pipe, cfg, metrics_path=None):
    if pipe.variant == "no_prompt_tuner":
        # identity tuner: nothing to fit
        pipe.stage = "stage1"
        return []
    s = cfg.stage1
    ds = D.make_dataset(cfg.data.n_stage1, cfg.data.seed + 1, 3, cfg.task)
    held = D.make_dataset(200, cfg.data.seed + 2, 3, cfg.task) if metrics_path else None
    losses = train_stage1(
        pipe.tuner,
        pipe.encoders,
        ds,
        Stage1Config(s.temperature, s.batch_size, s.epochs, s.lr, cfg.seed),
        metrics_path=metrics_path,
        eval_set=held,
    )
    pipe.stage = "stage1"
    return losses


def run_stage2(pipe, cfg, log_path=None):
    s = cfg.stage2
    return train_stage2(
        pipe,
        weights_dict(cfg.weights, pipe.variant),
        CurriculumSchedule(*s.curriculum),
        s.epochs,
        cfg.seed,
        task=cfg.task,
        samples_per_epoch=cfg.data.samples_per_epoch,
        batch_size=s.batch_size,
        lr=s.lr,
        log_path=log_path,
        lr_decay=s.lr_decay,
    )


def train_variant(cfg, base, variant):
    pipe = new_pipeline(cfg, base, variant)
    run_stage1(pipe, cfg)
    history = run_stage2(pipe, cfg)
    return pipe, history


def run_ablation(cfg, seeds, variants=VARIANTS, eval_samples=None, k=1):
    """Train and evaluate every variant for every seed. Variants of one
    seed share the frozen encoders, data stream and evaluation seed.
    Returns a list of MetricsReport (one per variant per seed)."""
    reports = []
    for seed in seeds:
        scfg = with_seed(cfg, seed)
        base = run_pretrain(scfg)
        samples = eval_samples or eval_set(scfg)
        for variant in variants:
            pipe, _ = train_variant(scfg, base, variant)
            rep = evaluate_pipeline(pipe, samples, [seed], scfg.task, k=k, method=variant)[0]
            log.info("seed %d %s fid %.4f", seed, variant, rep.fid)
            reports.append(rep)
    return reports


def with_seed(cfg, seed):
    obj = cfg.to_dict()
    obj["seed"] = int(seed)
    obj["data"]["seed"] = int(seed)
    return RunConfig.from_dict(obj)


def summarize(reports):
    """Mean of each metric per method."""
    out = {}
    for method in dict.fromkeys(r.method for r in reports):
        rows = [r for r in reports if r.method == method]
        out[method] = {m: float(np.mean([getattr(r, m) for r in rows])) for m in ("fid", "lpips_proxy", "bleu", "cider")}
    return out
