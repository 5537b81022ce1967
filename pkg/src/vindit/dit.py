"""Chunk denoiser: pre-norm transformer blocks over video, local and global tokens.

Parameters live in a flat ``dict[str, Tensor]``; every function here takes the
dict plus a name prefix, so the same helpers serve the DiT and the VIN.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .numcore import Tensor

Params = dict[str, Tensor]


@dataclass(frozen=True)
class DiTConfig:
    L: int = 4
    d: int = 64
    heads: int = 4
    d_text: int = 32
    n_text: int = 2
    n_classes: int = 8
    T: int = 50
    ffn_mult: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"width {self.d} not divisible by {self.heads} heads")


@dataclass
class ConditioningBundle:
    text: Tensor | None  # n_text x d, may be None for no conditioning
    time: Tensor  # d-vector


def _normal(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    return Tensor(rng.standard_normal(shape) / math.sqrt(fan_in), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


def init_attention(rng, d: int, prefix: str, zero_out: bool = True) -> Params:
    p = {f"{prefix}.w{k}": _normal(rng, d, (d, d)) for k in "qkv"}
    p[f"{prefix}.wo"] = _zeros((d, d)) if zero_out else _normal(rng, d, (d, d))
    return p


def init_block(rng, d: int, ffn_mult: int, prefix: str) -> Params:
    hidden = ffn_mult * d
    p = {
        f"{prefix}.ln1.g": _ones(d),
        f"{prefix}.ln1.b": _zeros(d),
        f"{prefix}.ln2.g": _ones(d),
        f"{prefix}.ln2.b": _zeros(d),
        f"{prefix}.ff.w1": _normal(rng, d, (d, hidden)),
        f"{prefix}.ff.b1": _zeros(hidden),
        f"{prefix}.ff.w2": _zeros((hidden, d)),
        f"{prefix}.ff.b2": _zeros(d),
    }
    p.update(init_attention(rng, d, f"{prefix}.attn"))
    return p


def init_dit(rng, cfg: DiTConfig, voxel_width: int) -> Params:
    d = cfg.d
    p: Params = {
        "time.w1": _normal(rng, d, (d, d)),
        "time.b1": _zeros(d),
        "time.w2": _normal(rng, d, (d, d)),
        "time.b2": _zeros(d),
        "text.table": Tensor(rng.standard_normal((cfg.n_classes * cfg.n_text, cfg.d_text)), requires_grad=True),
        "text.proj": _normal(rng, cfg.d_text, (cfg.d_text, d)),
        "head.ln.g": _ones(d),
        "head.ln.b": _zeros(d),
        "head.w": _zeros((d, voxel_width)),
        "head.b": _zeros(voxel_width),
    }
    for l in range(cfg.L):
        p.update(init_block(rng, d, cfg.ffn_mult, f"dit.{l}"))
    return p


def _split_heads(x: Tensor, heads: int) -> Tensor:
    n, d = x.shape
    return nc.transpose(nc.reshape(x, (n, heads, d // heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return nc.reshape(nc.transpose(x, (1, 0, 2)), (n, h * dh))


def attention_weights(q_src, kv_src, p: Params, prefix: str, heads: int) -> Tensor:
    """Softmax weights, shape (heads, n_q, n_kv)."""
    q = _split_heads(nc.matmul(q_src, p[f"{prefix}.wq"]), heads)
    k = _split_heads(nc.matmul(kv_src, p[f"{prefix}.wk"]), heads)
    q = nc.scale(q, 1.0 / math.sqrt(q.shape[-1]))
    return nc.softmax(nc.matmul(q, nc.transpose(k, (0, 2, 1))), axis=-1)


def multi_head_attention(q_src, kv_src, p: Params, prefix: str, heads: int) -> Tensor:
    """Scaled dot-product attention per head, heads concatenated, output projected."""
    q_src, kv_src = nc.as_tensor(q_src), nc.as_tensor(kv_src)
    d = p[f"{prefix}.wq"].shape[0]
    if q_src.shape[-1] != d or kv_src.shape[-1] != d:
        raise nc.ShapeError(f"attention width {d}, got queries {q_src.shape} and keys {kv_src.shape}")
    if kv_src.shape[0] == 0:
        raise nc.ContractError("attention over an empty key set")
    w = attention_weights(q_src, kv_src, p, prefix, heads)
    v = _split_heads(nc.matmul(kv_src, p[f"{prefix}.wv"]), heads)
    return nc.matmul(_merge_heads(nc.matmul(w, v)), p[f"{prefix}.wo"])


def layer_norm(x, p: Params, prefix: str, eps: float) -> Tensor:
    return nc.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"], eps)


def feed_forward(x, p: Params, prefix: str) -> Tensor:
    h = nc.gelu(nc.add(nc.matmul(x, p[f"{prefix}.w1"]), p[f"{prefix}.b1"]))
    return nc.add(nc.matmul(h, p[f"{prefix}.w2"]), p[f"{prefix}.b2"])


def transformer_block(x, context, p: Params, prefix: str, heads: int, eps: float) -> Tensor:
    """Pre-norm residual block; ``context`` rows are attended to but not updated."""
    h = layer_norm(x, p, f"{prefix}.ln1", eps)
    kv = h if context is None else nc.concat([h, layer_norm(context, p, f"{prefix}.ln1", eps)])
    x = nc.add(x, multi_head_attention(h, kv, p, f"{prefix}.attn", heads))
    return nc.add(x, feed_forward(layer_norm(x, p, f"{prefix}.ln2", eps), p, f"{prefix}.ff"))


def sinusoid(t: float, d: int, max_period: float = 10000.0) -> np.ndarray:
    half = d // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = float(t) * freqs
    emb = np.concatenate([np.cos(args), np.sin(args)])
    return np.pad(emb, (0, d - emb.size))


def time_embedding(t: int, p: Params, d: int) -> Tensor:
    h = nc.gelu(nc.add(nc.matmul(sinusoid(t, d)[None, :], p["time.w1"]), p["time.b1"]))
    return nc.reshape(nc.add(nc.matmul(h, p["time.w2"]), p["time.b2"]), (d,))


def text_embedding(class_id: int, p: Params, cfg: DiTConfig) -> Tensor:
    """Learned stand-in for prompt embeddings: ``n_text`` rows per class."""
    if not 0 <= class_id < cfg.n_classes:
        raise ValueError(f"class id {class_id} outside [0, {cfg.n_classes})")
    rows = np.arange(class_id * cfg.n_text, (class_id + 1) * cfg.n_text)
    return nc.matmul(nc.take_rows(p["text.table"], rows), p["text.proj"])


def condition(class_id: int | None, t: int, p: Params, cfg: DiTConfig) -> ConditioningBundle:
    text = None if class_id is None or cfg.n_text == 0 else text_embedding(class_id, p, cfg)
    return ConditioningBundle(text=text, time=time_embedding(t, p, cfg.d))


def dit_block(x, cond: ConditioningBundle, p: Params, l: int, cfg: DiTConfig) -> Tensor:
    x = nc.add(x, cond.time)
    return transformer_block(x, cond.text, p, f"dit.{l}", cfg.heads, cfg.ln_eps)


def denoise_chunk(
    x_chunk, x_local, z, cond: ConditioningBundle, p: Params, cfg: DiTConfig
) -> Tensor:
    """Noise prediction for ``[x_local, x_chunk]`` given global tokens ``z``.

    Returns voxel-space rows (width of ``head.w``) for the local and chunk
    tokens in that order; global-token rows are dropped after the last block.
    ``x_local`` and ``z`` may be ``None`` or have zero rows.
    """
    x_chunk = nc.as_tensor(x_chunk)
    d = cfg.d
    parts = []
    if x_local is not None and x_local.shape[0]:
        parts.append(x_local)
    parts.append(x_chunk)
    n_video = sum(t.shape[0] for t in parts)
    if z is not None:
        if z.shape[-1] != d:
            raise nc.ShapeError(f"global tokens have width {z.shape[-1]}, model width is {d}")
        if z.shape[0]:
            parts.append(z)
    for t in parts:
        if t.shape[-1] != d:
            raise nc.ShapeError(f"token width {t.shape[-1]} != model width {d}")
    h = parts[0] if len(parts) == 1 else nc.concat(parts)
    for l in range(cfg.L):
        h = dit_block(h, cond, p, l, cfg)
    if h.shape[0] != n_video:
        h = nc.getitem(h, slice(0, n_video))
    h = layer_norm(h, p, "head.ln", cfg.ln_eps)
    return nc.add(nc.matmul(h, p["head.w"]), p["head.b"])
