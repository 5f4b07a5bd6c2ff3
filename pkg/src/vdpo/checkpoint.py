"""Binary checkpoint format.

Byte layout (all integers little-endian):

    b"VDPO"                 magic
    u32                     format version
    u32 n, n bytes          UTF-8 JSON header {"config": ..., "stage": ...}
    u32                     number of sections
    per section:
        u32 n, n bytes      section name
        u32                 number of entries
        per entry:
            u32 n, n bytes  parameter name
            u32             ndim
            u64 * ndim      shape
            f64 * prod      row-major values

Sections are always written in the order encoders, tuner, instructor,
denoiser. Values are stored as raw doubles, so a load/save round trip is
bitwise exact.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .pipeline import STAGES, build_pipeline

MAGIC = b"VDPO"
VERSION = 1
SECTIONS = ("encoders", "tuner", "instructor", "denoiser")


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    stage: str
    sections: dict  # section name -> list of (param name, float64 array)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        if self.config.to_dict() != other.config.to_dict() or self.stage != other.stage:
            return False
        if list(self.sections) != list(other.sections):
            return False
        for name in self.sections:
            a, b = self.sections[name], other.sections[name]
            if [k for k, _ in a] != [k for k, _ in b]:
                return False
            for (_, x), (_, y) in zip(a, b):
                if x.shape != y.shape or x.tobytes() != y.tobytes():
                    return False
        return True


def _pack_str(s):
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode(ckpt: Checkpoint) -> bytes:
    if ckpt.stage not in STAGES:
        raise CheckpointError(f"unknown stage {ckpt.stage!r}")
    header = json.dumps({"config": ckpt.config.to_dict(), "stage": ckpt.stage}, sort_keys=True)
    out = [MAGIC, struct.pack("<I", VERSION), _pack_str(header), struct.pack("<I", len(SECTIONS))]
    for name in SECTIONS:
        entries = ckpt.sections.get(name, [])
        out += [_pack_str(name), struct.pack("<I", len(entries))]
        for key, arr in entries:
            arr = np.ascontiguousarray(arr, dtype="<f8")
            out += [_pack_str(key), struct.pack("<I", arr.ndim), struct.pack(f"<{arr.ndim}Q", *arr.shape)]
            out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def text(self):
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError("checkpoint string is not UTF-8") from None


def decode(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a VDPO checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version} is not supported (expected {VERSION})")
    try:
        header = json.loads(r.text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    config = RunConfig.from_dict(header["config"])
    sections = {}
    for _ in range(r.u32()):
        name = r.text()
        entries = []
        for _ in range(r.u32()):
            key = r.text()
            ndim = r.u32()
            shape = struct.unpack(f"<{ndim}Q", r.take(8 * ndim))
            count = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
            entries.append((key, data))
        sections[name] = entries
    if r.pos != len(buf):
        raise CheckpointError("trailing bytes after checkpoint")
    if tuple(sections) != SECTIONS:
        raise CheckpointError(f"checkpoint sections {tuple(sections)} != {SECTIONS}")
    return Checkpoint(config, header["stage"], sections)


def save(ckpt: Checkpoint, path):
    with open(path, "wb") as fh:
        fh.write(encode(ckpt))


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return decode(fh.read())


# -- pipelines <-> checkpoints -------------------------------------------------------


def from_pipeline(pipe, config: RunConfig) -> Checkpoint:
    enc = [("vision." + k, v) for k, v in pipe.encoders.vision.state()]
    enc += [("text." + k, v) for k, v in pipe.encoders.text.state()]
    return Checkpoint(
        config,
        pipe.stage,
        {
            "encoders": enc,
            "tuner": pipe.tuner.state(),
            "instructor": pipe.decoder.state(),
            "denoiser": pipe.denoiser.state(),
        },
    )


def to_pipeline(ckpt: Checkpoint):
    """Rebuild the pipeline a checkpoint describes; encoders come back frozen."""
    cfg = ckpt.config
    pipe = build_pipeline(cfg.dims, cfg.diffusion, cfg.seed, cfg.variant)
    enc = ckpt.sections["encoders"]
    try:
        pipe.encoders.vision.load_state((k[7:], v) for k, v in enc if k.startswith("vision."))
        pipe.encoders.text.load_state((k[5:], v) for k, v in enc if k.startswith("text."))
        pipe.tuner.load_state(ckpt.sections["tuner"])
        pipe.decoder.load_state(ckpt.sections["instructor"])
        pipe.denoiser.load_state(ckpt.sections["denoiser"])
    except ValueError as exc:
        raise CheckpointError(f"checkpoint does not match its config: {exc}") from None
    pipe.encoders.freeze()
    pipe.stage = ckpt.stage
    return pipe
