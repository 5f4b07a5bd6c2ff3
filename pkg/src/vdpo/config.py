"""Run configuration: one JSON document, validated exhaustively.

Unknown keys anywhere are rejected. Every default here mirrors the default
of the module that consumes it (checked in the test suite).
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from . import data as D
from .diffusion import NoiseSchedule


VARIANTS = ("full", "no_prompt_tuner", "no_dual_modality")


class ConfigError(ValueError):
    pass


@dataclass
class Dims:
    image_size: int = D.IMAGE_SIZE
    d_v: int = 32
    d_t: int = 32
    vocab: int = D.VOCAB_SIZE
    conv_channels: int = 8
    tuner_hidden: int = 64
    token_dim: int = 32
    decoder_hidden: int = 64
    denoiser_hidden: int = 256
    temb_dim: int = 16


@dataclass
class DataConfig:
    n_pretrain: int = 1600
    n_stage1: int = 1600
    samples_per_epoch: int = 800
    seed: int = 0


@dataclass
class PretrainConfig:
    epochs: int = 30
    lr: float = 3e-3
    batch_size: int = 32
    temperature: float = 0.07
    decoder_epochs: int = 10
    decoder_lr: float = 3e-3
    decoder_noise: float = 0.1


@dataclass
class Stage1Settings:
    temperature: float = 0.07
    batch_size: int = 16
    epochs: int = 20
    lr: float = 3e-3


@dataclass
class Stage2Settings:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    lr_decay: str = "linear"
    curriculum: list = field(default_factory=lambda: [2, 5])


@dataclass
class LossWeights:
    sem: float = 1.0
    gen: float = 1.0
    align: float = 1.0
    caption: float = 1.0
    diffusion: float = 1.0


@dataclass
class DiffusionConfig:
    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    pretrain_steps: int = 3000
    pretrain_lr: float = 3e-3


@dataclass
class EvalConfig:
    n_samples: int = 500
    k: int = 1
    seeds: list = field(default_factory=lambda: [0])


@dataclass
class RunConfig:
    task: str = "sketch2img"
    variant: str = "full"
    seed: int = 0
    dims: Dims = field(default_factory=Dims)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    stage1: Stage1Settings = field(default_factory=Stage1Settings)
    stage2: Stage2Settings = field(default_factory=Stage2Settings)
    weights: LossWeights = field(default_factory=LossWeights)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        if self.task not in D.TASKS:
            raise ConfigError(f"task must be one of {D.TASKS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}")
        d = self.dims
        if d.d_v != d.d_t:
            raise ConfigError("d_v must equal d_t (identity-tuner ablation relies on it)")
        if d.vocab != D.VOCAB_SIZE:
            raise ConfigError(f"vocab must be {D.VOCAB_SIZE} for the caption vocabulary")
        if d.image_size != D.IMAGE_SIZE:
            raise ConfigError(f"image_size must be {D.IMAGE_SIZE}")
        for name, value in _numbers(self):
            if isinstance(value, bool):
                continue
            if value != value or value in (float("inf"), float("-inf")):
                raise ConfigError(f"{name} must be finite")
        for name in ("sem", "gen", "align", "caption", "diffusion"):
            if getattr(self.weights, name) < 0:
                raise ConfigError(f"weights.{name} must be non-negative")
        positive = [
            ("pretrain.epochs", self.pretrain.epochs),
            ("pretrain.lr", self.pretrain.lr),
            ("pretrain.temperature", self.pretrain.temperature),
            ("pretrain.decoder_lr", self.pretrain.decoder_lr),
            ("stage1.temperature", self.stage1.temperature),
            ("stage1.epochs", self.stage1.epochs),
            ("stage1.lr", self.stage1.lr),
            ("stage2.epochs", self.stage2.epochs),
            ("stage2.lr", self.stage2.lr),
            ("data.n_pretrain", self.data.n_pretrain),
            ("data.n_stage1", self.data.n_stage1),
            ("data.samples_per_epoch", self.data.samples_per_epoch),
            ("eval.n_samples", self.eval.n_samples),
        ]
        for name, value in positive:
            if not value > 0:
                raise ConfigError(f"{name} must be positive")
        if self.pretrain.decoder_epochs < 0 or self.pretrain.decoder_noise < 0:
            raise ConfigError("pretrain.decoder_epochs and pretrain.decoder_noise must be non-negative")
        if self.pretrain.batch_size < 2 or self.stage1.batch_size < 2 or self.stage2.batch_size < 2:
            raise ConfigError("batch sizes must be at least 2")
        cur = self.stage2.curriculum
        if len(cur) != 2 or not 0 <= cur[0] <= cur[1]:
            raise ConfigError("stage2.curriculum must be [e1, e2] with 0 <= e1 <= e2")
        if self.eval.k not in (1, 3, 5):
            raise ConfigError("eval.k must be 1, 3 or 5")
        if not self.eval.seeds:
            raise ConfigError("eval.seeds must not be empty")
        if not 0 < self.diffusion.beta_start < self.diffusion.beta_end < 1:
            raise ConfigError("need 0 < beta_start < beta_end < 1")
        if self.stage2.lr_decay not in ("linear", "constant"):
            raise ConfigError("stage2.lr_decay must be 'linear' or 'constant'")
        if self.diffusion.pretrain_steps < 0 or not self.diffusion.pretrain_lr > 0:
            raise ConfigError("diffusion.pretrain_steps must be >= 0 and pretrain_lr > 0")
        if self.diffusion.steps < 2:
            raise ConfigError("diffusion.steps must be at least 2")
        try:
            NoiseSchedule(self.diffusion.steps, self.diffusion.beta_start, self.diffusion.beta_end)
        except ValueError as exc:
            raise ConfigError(f"diffusion: {exc}") from None
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, obj):
        return _build(cls, obj, "").validate()

    @classmethod
    def load(cls, path):
        try:
            with open(path, encoding="utf-8") as fh:
                obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(obj)


def _numbers(obj, prefix=""):
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        name = prefix + f.name
        if dataclasses.is_dataclass(value):
            yield from _numbers(value, name + ".")
        elif isinstance(value, (int, float)):
            yield name, value


def _build(cls, obj, prefix):
    if not isinstance(obj, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(obj) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(prefix + k for k in unknown))}")
    kwargs = {}
    defaults = cls()
    for name, value in obj.items():
        default = getattr(defaults, name)
        where = prefix + name
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, where + ".")
        elif isinstance(default, bool) or isinstance(value, bool):
            raise ConfigError(f"{where}: booleans are not accepted here")
        elif isinstance(default, int) and not isinstance(default, bool):
            if not isinstance(value, int):
                raise ConfigError(f"{where} must be an integer")
            kwargs[name] = value
        elif isinstance(default, float):
            if not isinstance(value, (int, float)):
                raise ConfigError(f"{where} must be a number")
            kwargs[name] = float(value)
        elif isinstance(default, list):
            if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{where} must be a list of integers")
            kwargs[name] = list(value)
        else:
            if not isinstance(value, str):
                raise ConfigError(f"{where} must be a string")
            kwargs[name] = value
    return cls(**kwargs)
