"""Synthetic shape scenes, their edge/sketch conditions and captions.

Dataset file format (JSON lines, UTF-8), one sample per line::

    {"shape": "circle", "size": "large", "intensity": "bright",
     "position": "center", "caption": [0, 3, ...],
     "condition": [256 floats], "target": [256 floats]}

Images are stored row-major as flat float arrays. Floats round-trip
exactly through ``json`` (shortest repr).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Rng

IMAGE_SIZE = 16

SHAPES = ("circle", "square", "triangle", "cross")
SIZES = ("small", "large")
INTENSITIES = ("dim", "bright")
POSITIONS = ("upper-left", "upper-right", "lower-left", "lower-right", "center")

BOS, EOS, PAD = 0, 1, 2
WORDS = ("<bos>", "<eos>", "<pad>", "draw") + SIZES + INTENSITIES + SHAPES + POSITIONS
WORD_TO_ID = {w: i for i, w in enumerate(WORDS)}
VOCAB_SIZE = len(WORDS)
CAPTION_LEN = 8

INTENSITY_VALUE = {"dim": 0.5, "bright": 1.0}
_RADIUS = {"small": 3.0, "large": 4.0}
_CENTER = {
    "upper-left": (4.0, 4.0),
    "upper-right": (4.0, 12.0),
    "lower-left": (12.0, 4.0),
    "lower-right": (12.0, 12.0),
    "center": (8.0, 8.0),
}

EDGE_THRESHOLD = 0.25
SKETCH_DROPOUT = 0.2
TASKS = ("edge2img", "sketch2img")


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    shape: str
    size: str
    intensity: str
    position: str

    def __post_init__(self):
        for value, allowed in (
            (self.shape, SHAPES),
            (self.size, SIZES),
            (self.intensity, INTENSITIES),
            (self.position, POSITIONS),
        ):
            if value not in allowed:
                raise ValueError(f"{value!r} not one of {allowed}")


@dataclass
class Sample:
    condition: np.ndarray
    target: np.ndarray
    caption: tuple
    spec: SceneSpec

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.spec == other.spec
            and tuple(self.caption) == tuple(other.caption)
            and np.array_equal(self.condition, other.condition)
            and np.array_equal(self.target, other.target)
        )


def render_scene(spec: SceneSpec, size=IMAGE_SIZE) -> np.ndarray:
    """Rasterize ``spec`` by sampling pixel centres; background is 0."""
    scale = size / IMAGE_SIZE
    cy, cx = (c * scale for c in _CENTER[spec.position])
    r = _RADIUS[spec.size] * scale
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dy, dx = ys - cy, xs - cx
    if spec.shape == "circle":
        mask = dx * dx + dy * dy <= r * r
    elif spec.shape == "square":
        mask = np.maximum(np.abs(dx), np.abs(dy)) <= 0.75 * r
    elif spec.shape == "triangle":
        # apex up, base at dy = +r
        mask = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    else:
        arm = r / 3.0
        mask = ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    return mask * INTENSITY_VALUE[spec.intensity]


def edge_map(img: np.ndarray) -> np.ndarray:
    """Binary edges from central differences: |dx| + |dy| > 0.25.
    Border pixels are replicated, so a constant image has no edges."""
    img = np.asarray(img, dtype=np.float64)
    if img.min() < 0 or img.max() > 1:
        raise ValueError("edge_map expects values in [0, 1]")
    p = np.pad(img, 1, mode="edge")
    gx = p[1:-1, 2:] - p[1:-1, :-2]
    gy = p[2:, 1:-1] - p[:-2, 1:-1]
    return (np.abs(gx) + np.abs(gy) > EDGE_THRESHOLD).astype(np.float64)


def sketch_map(img: np.ndarray, rng: Rng) -> np.ndarray:
    """Edge map with seeded pixel dropout (p = 0.2)."""
    edges = edge_map(img)
    keep = rng.uniform(edges.shape) >= SKETCH_DROPOUT
    return edges * keep


def caption_of(spec: SceneSpec) -> tuple:
    words = ("draw", spec.size, spec.intensity, spec.shape, spec.position)
    ids = [BOS] + [WORD_TO_ID[w] for w in words] + [EOS]
    return tuple(ids + [PAD] * (CAPTION_LEN - len(ids)))


def strip_special(ids) -> list:
    """Words of a token sequence without BOS/EOS/PAD, cut at the first EOS."""
    out = []
    for i in ids:
        i = int(i)
        if i == EOS:
            break
        if i in (BOS, PAD):
            continue
        out.append(WORDS[i])
    return out


def detokenize(ids) -> str:
    return " ".join(strip_special(ids))


_LEVEL_VARYING = {
    1: ("shape",),
    2: ("shape", "size", "intensity"),
    3: ("shape", "size", "intensity", "position"),
}
_DEFAULTS = {"shape": "circle", "size": "large", "intensity": "bright", "position": "center"}
_CHOICES = {"shape": SHAPES, "size": SIZES, "intensity": INTENSITIES, "position": POSITIONS}


def level_specs(level) -> list:
    """All scene specs reachable at a curriculum level, in a fixed order."""
    if level not in _LEVEL_VARYING:
        raise ValueError(f"curriculum level must be 1, 2 or 3, got {level!r}")
    varying = _LEVEL_VARYING[level]
    specs = []
    for combo in itertools.product(*(_CHOICES[k] for k in varying)):
        fields = dict(_DEFAULTS)
        fields.update(zip(varying, combo))
        specs.append(SceneSpec(**fields))
    return specs


def make_sample(spec, task="edge2img", rng=None) -> Sample:
    target = render_scene(spec)
    if task == "edge2img":
        condition = edge_map(target)
    elif task == "sketch2img":
        if rng is None:
            raise ValueError("sketch2img needs an rng for dropout")
        condition = sketch_map(target, rng)
    else:
        raise ValueError(f"unknown task {task!r}")
    return Sample(condition, target, caption_of(spec), spec)


def make_dataset(n, seed, curriculum_level=3, task="edge2img") -> list:
    """``n`` samples balanced over the attributes that vary at
    ``curriculum_level``: the spec list is repeated in whole shuffled
    passes, truncated to ``n``, then shuffled once more."""
    if n <= 0:
        raise ValueError("n must be positive")
    specs = level_specs(curriculum_level)
    rng = Rng(seed, curriculum_level, TASKS.index(task))
    order = []
    while len(order) < n:
        order.extend(rng.permutation(len(specs)).tolist())
    order = order[:n]
    order = [order[i] for i in rng.permutation(n)]
    noise = rng.child(1)
    return [make_sample(specs[i], task, noise) for i in order]


def context_conditions(spec, k, task, rng) -> list:
    """``k`` independent condition renderings of the same scene."""
    return [make_sample(spec, task, rng).condition for _ in range(k)]


# -- persistence ---------------------------------------------------------------


def _sample_to_json(s: Sample) -> str:
    return json.dumps(
        {
            "shape": s.spec.shape,
            "size": s.spec.size,
            "intensity": s.spec.intensity,
            "position": s.spec.position,
            "caption": [int(i) for i in s.caption],
            "condition": s.condition.reshape(-1).tolist(),
            "target": s.target.reshape(-1).tolist(),
        }
    )


def _sample_from_json(obj) -> Sample:
    spec = SceneSpec(obj["shape"], obj["size"], obj["intensity"], obj["position"])
    side = int(round(len(obj["target"]) ** 0.5))
    cond = np.asarray(obj["condition"], dtype=np.float64).reshape(side, side)
    target = np.asarray(obj["target"], dtype=np.float64).reshape(side, side)
    return Sample(cond, target, tuple(int(i) for i in obj["caption"]), spec)


def save_dataset(samples, path):
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(_sample_to_json(s) + "\n")


def load_dataset(path) -> list:
    samples = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                samples.append(_sample_from_json(obj))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetFormatError(f"{path}: line {lineno}: {exc}") from None
    return samples
