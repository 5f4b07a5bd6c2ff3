"""Command-line entry point.

Exit codes: 0 ok, 2 usage or config error, 3 missing prerequisite (file or
earlier stage), 4 numerical failure, 5 unreadable checkpoint/data/report
file (bad magic, version mismatch, corrupt content).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt_io
from . import data as D
from . import reports as rep
from .config import ConfigError, RunConfig
from .diffusion import read_pgm, write_pgm
from .metrics import MetricError, context_sets, evaluate_pipeline
from .numerics import NonFiniteError, Rng
from .runner import new_pipeline, run_ablation, run_pretrain, run_stage1, run_stage2
from .training import TrainingDiverged

log = logging.getLogger("vdpo")

EXIT_OK, EXIT_USAGE, EXIT_PREREQ, EXIT_NUMERIC, EXIT_FORMAT = 0, 2, 3, 4, 5

STAGE_FLAGS = {"pretrain": "pretrain", "1": "stage1", "2": "stage2"}
REQUIRED_BEFORE = {"stage1": "pretrain", "stage2": "stage1"}


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _need_file(path, what):
    if not os.path.exists(path):
        raise CliError(f"{what} not found: {path}", EXIT_PREREQ)


def _load_ckpt(path):
    _need_file(path, "checkpoint")
    return ckpt_io.load(path)


def _config(args, fallback=None):
    if args.config:
        _need_file(args.config, "config")
        return RunConfig.load(args.config)
    if fallback is not None:
        return fallback
    return RunConfig().validate()


# -- commands -------------------------------------------------------------------


def cmd_make_data(args):
    if args.level not in (1, 2, 3):
        raise CliError("--level must be 1, 2 or 3", EXIT_USAGE)
    if args.n <= 0:
        raise CliError("--n must be positive", EXIT_USAGE)
    samples = D.make_dataset(args.n, args.seed, args.level, args.task)
    D.save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")


def cmd_train(args):
    stage = STAGE_FLAGS[args.stage]
    if stage == "pretrain":
        cfg = _config(args)
        pipe = run_pretrain(cfg)
    else:
        if not args.init:
            raise CliError(f"{stage} needs --init <{REQUIRED_BEFORE[stage]} checkpoint>", EXIT_USAGE)
        init = _load_ckpt(args.init)
        if init.stage != REQUIRED_BEFORE[stage]:
            raise CliError(
                f"{stage} requires a {REQUIRED_BEFORE[stage]} checkpoint, got stage {init.stage!r}", EXIT_PREREQ
            )
        cfg = _config(args, init.config)
        if cfg.dims != init.config.dims:
            raise CliError("config dims differ from the checkpoint's", EXIT_USAGE)
        base = ckpt_io.to_pipeline(init)
        if stage == "stage1":
            pipe = new_pipeline(cfg, base, cfg.variant)
            run_stage1(pipe, cfg, metrics_path=args.log)
        else:
            if cfg.variant != init.config.variant:
                raise CliError("variant differs from the stage-1 checkpoint's", EXIT_USAGE)
            pipe = base
            run_stage2(pipe, cfg, log_path=args.log)
    ckpt_io.save(ckpt_io.from_pipeline(pipe, cfg), args.out)
    print(f"wrote {pipe.stage} checkpoint to {args.out}")


def _stage2_pipeline(path):
    ckpt = _load_ckpt(path)
    if ckpt.stage != "stage2":
        raise CliError("stage 2 required", EXIT_PREREQ)
    return ckpt.config, ckpt_io.to_pipeline(ckpt)


def _condition_sets(paths, k, task, seed):
    """PGM inputs form one k-image context set; a JSON-lines dataset gives
    one set per sample (its condition plus k-1 fresh renderings)."""
    for p in paths:
        _need_file(p, "condition file")
    if all(p.endswith(".pgm") for p in paths):
        images = [read_pgm(p).reshape(-1) for p in paths]
        if len(images) != k:
            raise CliError(f"--k {k} needs exactly {k} PGM condition files, got {len(images)}", EXIT_USAGE)
        return [images]
    if len(paths) != 1:
        raise CliError("pass either PGM files or a single dataset file", EXIT_USAGE)
    return context_sets(D.load_dataset(paths[0]), k, task, seed)


def cmd_generate(args):
    cfg, pipe = _stage2_pipeline(args.ckpt)
    sets = _condition_sets(args.condition_file, args.k, cfg.task, cfg.seed)
    v = pipe.context_embedding(sets)
    ids = pipe.prompts(v)
    images = pipe.synthesize(ids, Rng(cfg.seed, 601))
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "prompts.txt"), "w", encoding="utf-8") as fh:
        for i, row in enumerate(ids):
            text = D.detokenize(row)
            fh.write(text + "\n")
            log.info("k=%d prompt %d: %s", args.k, i, text)
    for i, img in enumerate(images):
        write_pgm(img, os.path.join(args.out, f"image_{i:04d}.pgm"))
    print(f"wrote {len(images)} images and prompts to {args.out}")


def cmd_eval(args):
    cfg, pipe = _stage2_pipeline(args.ckpt)
    _need_file(args.data, "dataset")
    samples = D.load_dataset(args.data)
    k = args.k or cfg.eval.k
    seeds = args.seeds or cfg.eval.seeds
    generated = None
    if args.ground_truth:
        generated = (np.array([s.caption for s in samples]), np.stack([s.target.reshape(-1) for s in samples]))
    reports = evaluate_pipeline(pipe, samples, seeds, cfg.task, k=k, method=args.method, generated=generated)
    rep.save_reports(reports, args.report)
    for r in reports:
        print(f"seed {r.seed}: FID {r.fid:.6f} LPIPS-proxy {r.lpips_proxy:.6f} BLEU {r.bleu:.4f} CIDEr {r.cider:.4f}")


def cmd_ablate(args):
    cfg = _config(args)
    seeds = args.seeds or cfg.eval.seeds
    reports = run_ablation(cfg, seeds, k=args.k or cfg.eval.k)
    rep.save_reports(reports, args.report)
    sys.stdout.write(rep.render_md(reports))


def cmd_report(args):
    for p in args.inputs:
        _need_file(p, "report")
    text = rep.render(rep.load_reports(args.inputs), args.format)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# -- argument parsing -----------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    ap = argparse.ArgumentParser(prog="vdpo", description="Vision-driven prompt optimization at desk scale.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", parents=[common], help="write a synthetic dataset as JSON lines")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--level", type=int, default=3)
    p.add_argument("--task", choices=D.TASKS, default="sketch2img")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", parents=[common], help="run one training stage and write a checkpoint")
    p.add_argument("--stage", choices=tuple(STAGE_FLAGS), required=True)
    p.add_argument("--config")
    p.add_argument("--init", help="checkpoint of the previous stage")
    p.add_argument("--log", help="CSV metrics log for stage 1 or 2")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", parents=[common], help="condition image(s) -> prompt -> image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--condition-file", nargs="+", required=True)
    p.add_argument("--k", type=int, choices=(1, 3, 5), default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("eval", parents=[common], help="evaluate a stage-2 checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--k", type=int, choices=(1, 3, 5))
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--method")
    p.add_argument("--ground-truth", action="store_true", help="score ground truth as the generated output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="train and evaluate all variants for several seeds")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--k", type=int, choices=(1, 3, 5))
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", parents=[common], help="merge report files into a CSV or markdown table")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--format", choices=("csv", "md"), default="md")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, TrainingDiverged) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ckpt_io.CheckpointError, D.DatasetFormatError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
