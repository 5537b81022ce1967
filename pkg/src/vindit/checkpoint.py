"""Versioned little-endian checkpoint files.

Layout::

    b"VINC" u32 version
    u32 len, config text (utf-8)        -- the run's canonical config
    32 bytes sha256 of that text
    u64 step
    tensors      (parameters)
    f64 lr, beta1, beta2, eps; u64 adam step
    tensors      (first moments)
    tensors      (second moments)

``tensors`` is a u32 count followed by records of
``u32 name_len, name, u32 ndim, u64 dims..., f64 values``, sorted by name.
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .diffusion import Adam
from .ensemble import Ensemble

MAGIC = b"VINC"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: cfgmod.ExperimentConfig
    step: int
    params: dict[str, np.ndarray]
    adam: Adam


def _put_tensors(out: list, tensors: dict[str, np.ndarray]) -> None:
    out.append(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        out.append(arr.tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos} (wanted {n} more)")
        chunk = self.buf[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensors(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        out = {}
        for _ in range(count):
            (n,) = self.unpack("<I")
            name = self.take(n).decode()
            (ndim,) = self.unpack("<I")
            shape = self.unpack(f"<{ndim}Q")
            size = int(np.prod(shape, dtype=np.int64))
            out[name] = np.frombuffer(self.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        return out


def encode(cfg: cfgmod.ExperimentConfig, step: int, ens: Ensemble, opt: Adam) -> bytes:
    text = cfgmod.dumps(cfg).encode()
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(text)), text,
           hashlib.sha256(text).digest(), struct.pack("<Q", step)]
    _put_tensors(out, {n: t.data for n, t in ens.params.items()})
    out.append(struct.pack("<4dQ", opt.lr, opt.beta1, opt.beta2, opt.eps, opt.step_count))
    _put_tensors(out, opt.m)
    _put_tensors(out, opt.v)
    return b"".join(out)


def decode(buf: bytes, expect: cfgmod.ExperimentConfig | None = None) -> Checkpoint:
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    text = r.take(n)
    digest = r.take(32)
    if hashlib.sha256(text).digest() != digest:
        raise CheckpointError("config hash mismatch: embedded config is corrupt")
    cfg = cfgmod.loads(text.decode())
    if expect is not None and expect.digest() != digest:
        raise CheckpointError("config hash mismatch: checkpoint was written for a different config")
    (step,) = r.unpack("<Q")
    params = r.tensors()
    lr, b1, b2, eps, count = r.unpack("<4dQ")
    m, v = r.tensors(), r.tensors()
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after checkpoint")
    return Checkpoint(cfg, step, params, Adam(lr, b1, b2, eps, count, m, v))


def save(path, cfg: cfgmod.ExperimentConfig, step: int, ens: Ensemble, opt: Adam) -> None:
    Path(path).write_bytes(encode(cfg, step, ens, opt))


def load(path, expect: cfgmod.ExperimentConfig | None = None) -> Checkpoint:
    return decode(Path(path).read_bytes(), expect)


def restore(ck: Checkpoint) -> tuple[Ensemble, Adam]:
    """Rebuild the ensemble from the embedded config and copy the saved weights in."""
    ens = ck.config.build_ensemble()
    if set(ens.params) != set(ck.params):
        missing = sorted(set(ens.params) ^ set(ck.params))
        raise CheckpointError(f"parameter names differ from the config: {', '.join(missing[:5])}")
    for name, arr in ck.params.items():
        if ens.params[name].shape != arr.shape:
            raise CheckpointError(f"{name}: shape {arr.shape}, config expects {ens.params[name].shape}")
        ens.params[name].data = arr.copy()
    return ens, ck.adam
