"""Noise schedule, chunked training objective, and the samplers.

Diffusion state is carried as voxel rows (``N x P``, see :mod:`vindit.patchio`).
Steps are 1-based: ``schedule.alpha_bar[t]`` for ``t = 1..T``, with index 0
holding the clean-data identity values. Sampling runs ``t = T-1, ..., 1``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import numcore as nc
from .ensemble import Ensemble
from .numcore import Tape, Tensor
from .patchio import VideoTensor, video_from_rows


class ConfigError(ValueError):
    pass


class LayoutError(ValueError):
    pass


class TrainingFault(RuntimeError):
    pass


class SamplingFault(RuntimeError):
    pass


# --- schedule --------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray


def build_schedule(T: int = 50, beta_start: float = 2e-3, beta_end: float = 0.4) -> NoiseSchedule:
    """Linear betas over ``T`` steps.

    The defaults are the usual 1e-4..0.02 range over 1000 steps rescaled to 50
    steps, so ``alpha_bar[T]`` is effectively zero.
    """
    if T < 1 or not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"invalid schedule T={T}, beta in [{beta_start}, {beta_end}]")
    beta = np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)])
    alpha = 1.0 - beta
    alpha_bar = np.cumprod(alpha)
    sigma = np.sqrt(beta)
    sigma[:2] = 0.0
    return NoiseSchedule(T, beta, alpha, alpha_bar, sigma)


def add_noise(x0, eps, t: int, sched: NoiseSchedule) -> np.ndarray:
    ab = sched.alpha_bar[t]
    return math.sqrt(ab) * np.asarray(x0) + math.sqrt(1.0 - ab) * np.asarray(eps)


def ddpm_step(x_t, eps_hat, t: int, sched: NoiseSchedule, z) -> np.ndarray:
    """x_{t-1} = (x_t - (1 - a_t) / sqrt(1 - abar_t) * eps_hat) / sqrt(a_t) + sigma_t z."""
    a = sched.alpha[t]
    one_minus = 1.0 - a
    coef = one_minus / math.sqrt(1.0 - sched.alpha_bar[t]) if one_minus > 0.0 else 0.0
    return (np.asarray(x_t) - coef * np.asarray(eps_hat)) / math.sqrt(a) + sched.sigma[t] * np.asarray(z)


# --- chunk layout ----------------------------------------------------------


@dataclass(frozen=True)
class ChunkLayout:
    N: int
    N_s: int
    N_local: int
    tokens_per_frame: int
    chunks: tuple[tuple[int, int], ...]

    @property
    def n_chunks(self) -> int:
        return len(self.chunks)

    @property
    def F_local(self) -> int:
        return self.N_local // self.tokens_per_frame

    def local_range(self, i: int) -> tuple[int, int]:
        start = self.chunks[i][0]
        return (start, start) if i == 0 else (start - self.N_local, start)

    def local_len(self, i: int) -> int:
        lo, hi = self.local_range(i)
        return hi - lo


def make_chunk_layout(N: int, N_s: int, N_local: int, tokens_per_frame: int) -> ChunkLayout:
    """ceil(N / N_s) frame-aligned chunks; only the last may be short."""
    tpf = tokens_per_frame
    if tpf < 1 or N < 1 or N_s < 1 or N_local < 0:
        raise ConfigError(f"invalid layout sizes N={N}, N_s={N_s}, N_local={N_local}, tpf={tpf}")
    for name, v in (("N", N), ("N_s", N_s), ("N_local", N_local)):
        if v % tpf:
            raise ConfigError(f"{name}={v} is not a multiple of tokens_per_frame={tpf}")
    if N_local > N_s:
        raise ConfigError(f"N_local={N_local} exceeds chunk size N_s={N_s}")
    chunks = tuple((s, min(s + N_s, N)) for s in range(0, N, N_s))
    return ChunkLayout(N, N_s, N_local, tpf, chunks)


def frame_layout(ens: Ensemble, frames: int, chunk_frames: int, local_frames: int) -> ChunkLayout:
    tpf = ens.tokens_per_frame
    return make_chunk_layout(ens.num_tokens(frames), chunk_frames * tpf, local_frames * tpf, tpf)


# --- fusion ----------------------------------------------------------------

FUSION_MODES = ("none", "early", "mid", "late")


@dataclass(frozen=True)
class FusionConfig:
    mode: str = "early"
    t_alpha: int = 20
    t_beta: int | None = None
    F_local_tokens: int | None = None  # None: take the overlap width from the layout

    def __post_init__(self):
        if self.mode not in FUSION_MODES:
            raise ConfigError(f"fusion mode {self.mode!r} not in {FUSION_MODES}")
        if self.mode == "mid" and (self.t_beta is None or not self.t_beta < self.t_alpha):
            raise ConfigError(f"mid fusion needs t_beta < t_alpha, got {self.t_beta}, {self.t_alpha}")


def fusion_active(t: int, fcfg: FusionConfig) -> bool:
    if fcfg.mode == "early":
        return t > fcfg.t_alpha
    if fcfg.mode == "mid":
        return fcfg.t_beta < t < fcfg.t_alpha
    if fcfg.mode == "late":
        return t < fcfg.t_alpha
    return False


def fusion_weights(F_local: int, tokens_per_frame: int) -> np.ndarray:
    """Relative temporal position W(k) = 1..F_local, repeated over each frame's tokens."""
    return np.repeat(np.arange(1, F_local + 1), tokens_per_frame).astype(np.float64)


def fuse_pair(own, succ, W, F_local: int) -> np.ndarray:
    """((F_local - W) * own + W * succ) / F_local, row-wise.

    Evaluated as ``own + (W / F_local) * (succ - own)`` (same value), which is
    exact when both sources agree; rows with ``W == F_local`` take ``succ``.
    """
    own, succ = np.asarray(own, dtype=np.float64), np.asarray(succ, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64).reshape((-1,) + (1,) * (own.ndim - 1))
    fused = own + (W / F_local) * (succ - own)
    return np.where(W == F_local, succ, fused)


def fuse_tokens(preds: Sequence, layout: ChunkLayout, fcfg: FusionConfig | None = None) -> np.ndarray:
    """Merge per-chunk predictions (each with its local rows first) into N rows.

    Chunk ``i``'s tail overlaps the local rows of chunk ``i + 1``; those rows are
    blended frame by frame and every other row passes through.
    """
    if len(preds) != layout.n_chunks:
        raise LayoutError(f"{len(preds)} predictions for {layout.n_chunks} chunks")
    width = layout.N_local
    if fcfg is not None and fcfg.F_local_tokens is not None and fcfg.F_local_tokens != width:
        raise LayoutError(f"fusion overlap {fcfg.F_local_tokens} tokens, layout overlap {width}")
    tpf = layout.tokens_per_frame
    F_local = width // tpf
    W = fusion_weights(F_local, tpf)
    out = []
    for i, (s, e) in enumerate(layout.chunks):
        pred = np.asarray(getattr(preds[i], "data", preds[i]))
        n_loc = layout.local_len(i)
        if pred.shape[0] != n_loc + (e - s):
            raise LayoutError(
                f"chunk {i}: prediction has {pred.shape[0]} rows, expected {n_loc} local + {e - s}"
            )
        own = pred[n_loc:]
        if i + 1 < layout.n_chunks and width:
            succ = np.asarray(getattr(preds[i + 1], "data", preds[i + 1]))[:width]
            own = np.concatenate([own[:-width], fuse_pair(own[-width:], succ, W, F_local)])
        out.append(own)
    return np.concatenate(out)


def drop_local(preds: Sequence, layout: ChunkLayout) -> np.ndarray:
    return np.concatenate(
        [np.asarray(getattr(p, "data", p))[layout.local_len(i):] for i, p in enumerate(preds)]
    )


# --- chunk-parallel forward -------------------------------------------------


@dataclass
class ChunkPass:
    preds: list  # per chunk: (local + chunk rows) x P
    local_sources: list  # per chunk: token slice feeding the local context, before stop-gradient
    tokens: Tensor
    z: Tensor


def chunk_pass(ens: Ensemble, x_rows, index_map, t: int, class_id, layout: ChunkLayout, *,
               use_global: bool = True, T_s: float | None = None, detach_local: bool = True,
               order: Sequence[int] | None = None) -> ChunkPass:
    """Tokenize x_t once, build Z_t once, then denoise every chunk against them."""
    X = ens.tokenize(x_rows, index_map)
    cond = ens.condition(class_id, t)
    z = ens.global_tokens(X, index_map, cond, use_global, T_s)
    preds: list = [None] * layout.n_chunks
    sources: list = [None] * layout.n_chunks
    for i in order if order is not None else range(layout.n_chunks):
        s, e = layout.chunks[i]
        local = None
        lo, hi = layout.local_range(i)
        if hi > lo:
            sources[i] = nc.getitem(X, slice(lo, hi))
            local = nc.stop_gradient(sources[i]) if detach_local else sources[i]
        preds[i] = ens.denoise(nc.getitem(X, slice(s, e)), local, z, cond)
    return ChunkPass(preds, sources, X, z)


def chunk_losses(cp: ChunkPass, eps, layout: ChunkLayout) -> list[Tensor]:
    """Per-chunk mean squared error on the chunk's own rows (local rows dropped)."""
    out = []
    for i, (s, e) in enumerate(layout.chunks):
        n_loc = layout.local_len(i)
        pred = nc.getitem(cp.preds[i], slice(n_loc, None))
        out.append(nc.mean(nc.square(nc.sub(pred, eps[s:e]))))
    return out


def mean_of(tensors: Sequence[Tensor]) -> Tensor:
    total = tensors[0]
    for t in tensors[1:]:
        total = nc.add(total, t)
    return nc.scale(total, 1.0 / len(tensors))


# --- optimizer ----------------------------------------------------------------


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict) -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for name in sorted(grads):
            g = grads[name]
            m = self.beta1 * self.m.get(name, 0.0) + (1.0 - self.beta1) * g
            v = self.beta2 * self.v.get(name, 0.0) + (1.0 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            p = params[name]
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# --- training -------------------------------------------------------------------


@dataclass
class StepRecord:
    loss: float
    timesteps: list[int]
    chunk_losses: list[list[float]]


def train_step(ens: Ensemble, opt: Adam, batch: Sequence, index_map, layout: ChunkLayout,
               sched: NoiseSchedule, rng: np.random.Generator, *, use_global: bool = True,
               probe: Callable[[Tensor, list[ChunkPass]], None] | None = None) -> StepRecord:
    """One optimizer step on a batch of ``(x0_rows, class_id)`` pairs.

    Per clip: draw t uniformly from 1..T and eps ~ N(0, I), form x_t, run every
    chunk with stop-gradient local context and score the chunk's own rows.
    The clip loss is the mean of its chunk losses; the batch loss averages clips.
    ``probe`` sees the recorded loss and chunk passes before the update.
    """
    timesteps, parts, passes = [], [], []
    with Tape():
        clip_losses = []
        for x0, class_id in batch:
            t = int(rng.integers(1, sched.T + 1))
            eps = rng.standard_normal(np.shape(x0))
            x_t = add_noise(x0, eps, t, sched)
            cp = chunk_pass(ens, x_t, index_map, t, class_id, layout, use_global=use_global)
            passes.append(cp)
            losses = chunk_losses(cp, eps, layout)
            clip_losses.append(mean_of(losses))
            timesteps.append(t)
            parts.append([l.item() for l in losses])
        loss = mean_of(clip_losses)
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingFault(f"step {opt.step_count + 1}: non-finite loss {value} at t={timesteps}")
    if probe is not None:
        probe(loss, passes)
    names = ens.names()
    grads = nc.grad(loss, [ens.params[n] for n in names])
    opt.step(ens.params, dict(zip(names, grads)))
    return StepRecord(value, timesteps, parts)


# --- samplers -------------------------------------------------------------------


def _check_state(x: np.ndarray, t: int) -> None:
    if not np.isfinite(x).all():
        raise SamplingFault(f"non-finite sampler state at step t={t}")


def sample(ens: Ensemble, frames: int, layout: ChunkLayout, sched: NoiseSchedule,
           fcfg: FusionConfig, class_id=0, seed: int = 0, *, use_global: bool = True,
           T_s: float | None = None, order: Sequence[int] | None = None,
           trace: list | None = None) -> VideoTensor:
    """Chunk-parallel sampling with optional token fusion.

    Every chunk at step t reads the same x_t and Z_t. ``trace``, if given,
    receives ``(t, fused)`` per step; ``order`` permutes chunk evaluation.
    """
    N = ens.num_tokens(frames)
    if layout.N != N:
        raise ConfigError(f"layout covers {layout.N} tokens, {frames} frames have {N}")
    index_map = ens.index_map(frames)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((N, ens.voxel_width))
    for t in range(sched.T - 1, 0, -1):
        cp = chunk_pass(ens, x, index_map, t, class_id, layout, use_global=use_global,
                        T_s=T_s, order=order)
        fused = fusion_active(t, fcfg) and layout.n_chunks > 1 and layout.N_local > 0
        eps = fuse_tokens(cp.preds, layout, fcfg) if fused else drop_local(cp.preds, layout)
        if trace is not None:
            trace.append((t, fused))
        x = ddpm_step(x, eps, t, sched, rng.standard_normal(x.shape))
        _check_state(x, t)
    return VideoTensor(video_from_rows(x, ens.patch, ens.H, ens.W, frames), fps=ens.fps)


def sample_full(ens: Ensemble, frames: int, sched: NoiseSchedule, class_id=0, seed: int = 0, *,
                use_global: bool = True, T_s: float | None = None) -> VideoTensor:
    """Monolithic DDPM sampler: one denoiser call over all tokens per step."""
    N = ens.num_tokens(frames)
    index_map = ens.index_map(frames)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((N, ens.voxel_width))
    for t in range(sched.T - 1, 0, -1):
        x = _full_step(ens, x, None, index_map, t, class_id, sched, rng, use_global, T_s)
    return VideoTensor(video_from_rows(x, ens.patch, ens.H, ens.W, frames), fps=ens.fps)


def _full_step(ens, x, context, index_map, t, class_id, sched, rng, use_global, T_s):
    if context is not None:
        noisy = add_noise(context, rng.standard_normal(context.shape), t, sched)
        state = np.concatenate([noisy, x])
    else:
        state = x
    X = ens.tokenize(state, index_map)
    cond = ens.condition(class_id, t)
    z = ens.global_tokens(X, index_map, cond, use_global, T_s)
    eps = ens.denoise(X, None, z, cond).data
    if context is not None:
        eps = eps[context.shape[0]:]
    x = ddpm_step(x, eps, t, sched, rng.standard_normal(x.shape))
    _check_state(x, t)
    return x


def autoregressive_plan(frames: int, context_frames: int, step_frames: int) -> list[tuple[int, int, int]]:
    """Windows as ``(context_start, new_start, new_end)`` frame indices."""
    if step_frames < 1 or context_frames < 0:
        raise ConfigError(f"invalid autoregressive plan context={context_frames}, step={step_frames}")
    first = min(frames, context_frames + step_frames)
    plan = [(0, 0, first)]
    done = first
    while done < frames:
        new = min(step_frames, frames - done)
        plan.append((done - min(context_frames, done), done, done + new))
        done += new
    return plan


def sample_autoregressive(ens: Ensemble, frames: int, sched: NoiseSchedule, context_frames: int,
                          step_frames: int, class_id=0, seed: int = 0, *, use_global: bool = True,
                          T_s: float | None = None) -> VideoTensor:
    """Sequential windows; context frames are re-noised to level t at every step."""
    if context_frames + step_frames > ens.max_frames:
        raise ConfigError(
            f"context {context_frames} + step {step_frames} frames exceed the model window {ens.max_frames}"
        )
    tpf = ens.tokens_per_frame
    full_index = ens.index_map(frames)
    rng = np.random.default_rng(seed)
    rows = np.zeros((0, ens.voxel_width))
    for c0, n0, n1 in autoregressive_plan(frames, context_frames, step_frames):
        context = rows[c0 * tpf : n0 * tpf] if n0 > c0 else None
        index_map = full_index[c0 * tpf : n1 * tpf]
        x = rng.standard_normal(((n1 - n0) * tpf, ens.voxel_width))
        for t in range(sched.T - 1, 0, -1):
            x = _full_step(ens, x, context, index_map, t, class_id, sched, rng, use_global, T_s)
        rows = np.concatenate([rows, x])
    return VideoTensor(video_from_rows(rows, ens.patch, ens.H, ens.W, frames), fps=ens.fps)
