"""Global-token abstraction: one cross-attention read, then M self-attention blocks."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .dit import (
    Params,
    _ones,
    _zeros,
    attention_weights,
    init_attention,
    init_block,
    multi_head_attention,
    transformer_block,
)
from .numcore import Tensor


@dataclass(frozen=True)
class VINConfig:
    N_global: int = 16
    M: int = 2
    heads: int = 4
    d: int = 64
    T_s: float = 1.0
    ffn_mult: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.N_global < 1 or self.M < 1:
            raise ValueError(f"need N_global >= 1 and M >= 1, got {self.N_global}, {self.M}")
        if self.d % self.heads:
            raise ValueError(f"width {self.d} not divisible by {self.heads} heads")


LARGE_VIN = VINConfig(N_global=512, M=4, heads=32, d=4096, T_s=1.0)


def init_vin(rng, cfg: VINConfig) -> Params:
    d = cfg.d
    p: Params = {
        "vin.z_init": Tensor(rng.standard_normal((cfg.N_global, d)) / math.sqrt(d), requires_grad=True),
        "vin.enc.lnq.g": _ones(d),
        "vin.enc.lnq.b": _zeros(d),
        "vin.enc.lnkv.g": _ones(d),
        "vin.enc.lnkv.b": _zeros(d),
    }
    # The read is the only path from the video into the global tokens, so its
    # output projection starts non-zero.
    p.update(init_attention(rng, d, "vin.enc.attn", zero_out=False))
    for m in range(cfg.M):
        p.update(init_block(rng, d, cfg.ffn_mult, f"vin.proc.{m}"))
    return p


def _normed_streams(keyframes, z_init, p: Params, cfg: VINConfig):
    keyframes, z_init = nc.as_tensor(keyframes), nc.as_tensor(z_init)
    if keyframes.shape[0] == 0:
        raise nc.ContractError("VIN encoder needs at least one keyframe token")
    if keyframes.shape[-1] != cfg.d or z_init.shape[-1] != cfg.d:
        raise nc.ShapeError(f"VIN width {cfg.d}, got keys {keyframes.shape} and queries {z_init.shape}")
    q = nc.layer_norm(z_init, p["vin.enc.lnq.g"], p["vin.enc.lnq.b"], cfg.ln_eps)
    kv = nc.layer_norm(keyframes, p["vin.enc.lnkv.g"], p["vin.enc.lnkv.b"], cfg.ln_eps)
    return q, kv


def encode(keyframes, z_init, p: Params, cfg: VINConfig) -> Tensor:
    """Cross-attention read of keyframe tokens into the global tokens (residual on ``z_init``)."""
    q, kv = _normed_streams(keyframes, z_init, p, cfg)
    return nc.add(z_init, multi_head_attention(q, kv, p, "vin.enc.attn", cfg.heads))


def process(z, text, p: Params, cfg: VINConfig) -> Tensor:
    for m in range(cfg.M):
        z = transformer_block(z, text, p, f"vin.proc.{m}", cfg.heads, cfg.ln_eps)
    return z


def vin_forward(keyframes, time_emb, text, p: Params, cfg: VINConfig) -> Tensor:
    """Global tokens for one diffusion step: encode, add time embedding, process."""
    z = encode(keyframes, p["vin.z_init"], p, cfg)
    return process(nc.add(z, time_emb), text, p, cfg)


@dataclass
class AttentionExport:
    weights: np.ndarray  # heads x N_global x N_keys
    queries: np.ndarray  # heads x N_global x d_head, already scaled
    keys: np.ndarray  # heads x N_keys x d_head


def export_attention(keyframes, z_init, p: Params, cfg: VINConfig) -> AttentionExport:
    q, kv = _normed_streams(keyframes, z_init, p, cfg)
    h = cfg.heads
    dh = cfg.d // h
    qh = (q.data @ p["vin.enc.attn.wq"].data).reshape(-1, h, dh).transpose(1, 0, 2) / math.sqrt(dh)
    kh = (kv.data @ p["vin.enc.attn.wk"].data).reshape(-1, h, dh).transpose(1, 0, 2)
    w = attention_weights(q, kv, p, "vin.enc.attn", h).data
    return AttentionExport(weights=w, queries=qh, keys=kh)
