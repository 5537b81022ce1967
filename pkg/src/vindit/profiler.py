"""Analytic FLOP counts for full-attention vs. chunk-parallel VIN generation.

Convention: one multiply-accumulate costs 2 FLOPs. Softmax, normalization,
activations and residual adds are ignored. All counts are Python ints, so
every comparison in here is exact.

Per transformer block over ``n`` query tokens attending to ``m`` tokens
of width ``d``:

    qkv       2*n*d*3d            (projections of the block's own tokens)
    scores    2*n*m*d
    values    2*n*m*d
    out_proj  2*n*d*d
    ffn       2*n*d*(k*d)*2       (k = ffn_mult)

Text rows are costed as ordinary sequence members on both routes.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields, replace


class ProfilerError(ValueError):
    pass


@dataclass(frozen=True)
class ShapeConfig:
    N: int
    N_s: int
    N_local: int = 0
    N_global: int = 0
    n_text: int = 0
    d: int = 64
    heads: int = 4
    L: int = 4
    M: int = 0
    N_keys: int = 0
    ffn_mult: int = 4

    def __post_init__(self):
        bad = [f.name for f in fields(self) if not isinstance(getattr(self, f.name), int)]
        if bad:
            raise ProfilerError(f"shape fields must be ints: {', '.join(bad)}")
        for name in ("N", "N_s", "d", "heads", "L", "ffn_mult"):
            if getattr(self, name) <= 0:
                raise ProfilerError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("N_local", "N_global", "n_text", "M", "N_keys"):
            if getattr(self, name) < 0:
                raise ProfilerError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.N_s > self.N:
            raise ProfilerError(f"N_s={self.N_s} exceeds N={self.N}")

    @property
    def n_chunks(self) -> int:
        return -(-self.N // self.N_s)


CATEGORIES = ("qkv", "scores", "values", "out_proj", "ffn", "vin_encode", "vin_process")


@dataclass(frozen=True)
class CostBreakdown:
    qkv: int = 0
    scores: int = 0
    values: int = 0
    out_proj: int = 0
    ffn: int = 0
    vin_encode: int = 0
    vin_process: int = 0

    @property
    def total(self) -> int:
        return sum(getattr(self, c) for c in CATEGORIES)

    @property
    def attention(self) -> int:
        return self.scores + self.values

    def __add__(self, other: "CostBreakdown") -> "CostBreakdown":
        return CostBreakdown(*(getattr(self, c) + getattr(other, c) for c in CATEGORIES))

    def __mul__(self, k: int) -> "CostBreakdown":
        return CostBreakdown(*(getattr(self, c) * k for c in CATEGORIES))

    __rmul__ = __mul__

    def as_dict(self) -> dict:
        out = asdict(self)
        out["total"] = self.total
        return out


def attention_flops(n_q: int, n_kv: int, d: int) -> int:
    """Scores plus weighted values; projections are costed separately."""
    return 4 * n_q * n_kv * d


def block_cost(n: int, d: int, ffn_mult: int, n_kv: int | None = None) -> CostBreakdown:
    m = n if n_kv is None else n_kv
    return CostBreakdown(
        qkv=6 * n * d * d,
        scores=2 * n * m * d,
        values=2 * n * m * d,
        out_proj=2 * n * d * d,
        ffn=4 * ffn_mult * n * d * d,
    )


def full_flops(cfg: ShapeConfig) -> CostBreakdown:
    return cfg.L * block_cost(cfg.N + cfg.n_text, cfg.d, cfg.ffn_mult)


def vin_encode_flops(cfg: ShapeConfig) -> int:
    """K/V projections of the keyframe tokens plus the single read.

    Every term carries a factor of ``N_keys``. Without latent tokens there
    is no read at all.
    """
    if cfg.N_global == 0:
        return 0
    return 4 * cfg.N_keys * cfg.d * cfg.d + attention_flops(cfg.N_global, cfg.N_keys, cfg.d)


def vin_process_flops(cfg: ShapeConfig) -> int:
    """Query/output projections of the read plus M blocks over latents and text."""
    if cfg.N_global == 0:
        return 0
    read = 4 * cfg.N_global * cfg.d * cfg.d
    return read + cfg.M * block_cost(cfg.N_global + cfg.n_text, cfg.d, cfg.ffn_mult).total


def vin_flops(cfg: ShapeConfig) -> CostBreakdown:
    n = cfg.N_local + cfg.N_s + cfg.N_global + cfg.n_text
    dit = cfg.n_chunks * cfg.L * block_cost(n, cfg.d, cfg.ffn_mult)
    return replace(dit, vin_encode=vin_encode_flops(cfg), vin_process=vin_process_flops(cfg))


def savings(cfg: ShapeConfig) -> float:
    return 1.0 - vin_flops(cfg).total / full_flops(cfg).total


def degenerate(cfg: ShapeConfig) -> ShapeConfig:
    """The reduction under which the VIN route is plain full attention."""
    return replace(cfg, N_s=cfg.N, N_local=0, N_global=0, M=0)


# --- large-model proxy ----------------------------------------------------------


@dataclass(frozen=True)
class ProxyShape:
    """Latent-space shapes of a large text-to-video model.

    Frame counts are pixel frames; ``frames_per_latent`` pixel frames
    collapse into ``latents_per_group`` latent frames. Spatial tokens per
    latent frame assume an 8x VAE downsample and 2x2 patches on 192x320.
    """

    frames_per_group: int = 16
    latents_per_group: int = 5
    tokens_per_latent: int = 240
    F_chunk: int = 20
    F_local: int = 12
    N_global: int = 512
    M: int = 4
    d: int = 4096
    heads: int = 32
    L: int = 28
    n_text: int = 300
    ffn_mult: int = 4
    keyframe_every: int = 5  # latent frames per T_s = 1 s at 16 fps

    def latent_frames(self, frames: int) -> int:
        if frames % self.frames_per_group:
            raise ProfilerError(f"{frames} frames is not a multiple of {self.frames_per_group}")
        return frames // self.frames_per_group * self.latents_per_group

    def shape(self, frames: int) -> ShapeConfig:
        lat = self.latent_frames(frames)
        tpl = self.tokens_per_latent
        return ShapeConfig(
            N=lat * tpl,
            N_s=min(self.F_chunk, lat) * tpl,
            N_local=self.F_local * tpl,
            N_global=self.N_global,
            n_text=self.n_text,
            d=self.d,
            heads=self.heads,
            L=self.L,
            M=self.M,
            N_keys=math.ceil(lat / self.keyframe_every) * tpl,
            ffn_mult=self.ffn_mult,
        )


LARGE_PROXY = ProxyShape()
SWEEP_FRAMES = (64, 128, 256, 512)


@dataclass(frozen=True)
class SweepRow:
    frames: int
    full_total: int
    vin_total: int

    @property
    def savings(self) -> float:
        return 1.0 - self.vin_total / self.full_total


def sweep(proxy: ProxyShape = LARGE_PROXY, frames=SWEEP_FRAMES) -> list[SweepRow]:
    rows = []
    for f in frames:
        cfg = proxy.shape(f)
        rows.append(SweepRow(f, full_flops(cfg).total, vin_flops(cfg).total))
    return rows


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frames", "full_total", "vin_total", "savings"])
    for r in rows:
        w.writerow([r.frames, r.full_total, r.vin_total, f"{r.savings:.6f}"])
    return buf.getvalue()


def cost_report(cfg: ShapeConfig) -> str:
    """Key-value text: shape, then each route's categories, then savings."""
    lines = [f"shape.{k} = {v}" for k, v in asdict(cfg).items()]
    for route, cost in (("full", full_flops(cfg)), ("vin", vin_flops(cfg))):
        lines += [f"{route}.{k} = {v}" for k, v in cost.as_dict().items()]
    lines.append(f"savings = {savings(cfg):.6f}")
    return "\n".join(lines) + "\n"


def savings_band_holds(rows, lo: float = 0.25, hi: float = 0.40, longest: int = 2) -> bool:
    tail = sorted(rows, key=lambda r: r.frames)[-longest:]
    return all(lo <= r.savings <= hi for r in tail)
