"""End-to-end pipelines behind the CLI: training, sampling, evaluation, ablations."""
from __future__ import annotations

import time
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Callable

import numpy as np

from . import metrics
from .config import ExperimentConfig
from .diffusion import (
    Adam,
    ConfigError,
    FusionConfig,
    frame_layout,
    sample,
    sample_autoregressive,
    sample_full,
    train_step,
)
from .ensemble import Ensemble
from .patchio import DatasetSpec, VideoTensor, generate_synthetic, voxel_rows

SAMPLE_MODES = ("vin", "full", "autoregressive")


@lru_cache(maxsize=4)
def _dataset(spec: DatasetSpec, p1: int, p2: int, p3: int, d: int):
    from .patchio import PatchSpec

    patch = PatchSpec(p1, p2, p3, d)
    out = []
    for i in range(spec.clips):
        video, class_id, _ = generate_synthetic(spec, i)
        out.append((voxel_rows(video.values, patch), class_id))
    return tuple(out)


def dataset_rows(cfg: ExperimentConfig):
    p = cfg.patch
    return _dataset(cfg.data, p.p1, p.p2, p.p3, p.d)


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Training randomness for one step depends only on (seed, step), so a
    resumed run draws exactly what an uninterrupted one would."""
    return np.random.default_rng([seed, step, 0x7A])


@dataclass
class TrainResult:
    ens: Ensemble
    opt: Adam
    losses: list[float]
    step: int
    seconds: float


def train(cfg: ExperimentConfig, steps: int | None = None, *, ens: Ensemble | None = None,
          opt: Adam | None = None, start: int = 0, use_global: bool = True,
          on_step: Callable[[int, float, Ensemble, Adam], None] | None = None) -> TrainResult:
    steps = cfg.optim.steps if steps is None else steps
    ens = ens or cfg.build_ensemble()
    o = cfg.optim
    opt = opt or Adam(o.lr, o.beta1, o.beta2, o.eps)
    data = dataset_rows(cfg)
    sched = cfg.build_schedule()
    layout = frame_layout(ens, cfg.data.F, cfg.layout.chunk_frames, cfg.layout.local_frames)
    index_map = ens.index_map(cfg.data.F)
    losses = []
    t0 = time.perf_counter()
    for step in range(start, start + steps):
        rng = step_rng(cfg.run.seed, step)
        picks = rng.integers(len(data), size=o.batch)
        rec = train_step(ens, opt, [data[i] for i in picks], index_map, layout, sched, rng,
                         use_global=use_global)
        losses.append(rec.loss)
        if on_step is not None:
            on_step(step + 1, rec.loss, ens, opt)
    return TrainResult(ens, opt, losses, start + steps, time.perf_counter() - t0)


@dataclass(frozen=True)
class SampleSettings:
    """Inference knobs that ablations override."""

    use_global: bool = True
    fusion: FusionConfig = FusionConfig()
    local_frames: int = 4
    T_s: float | None = None


def default_settings(cfg: ExperimentConfig) -> SampleSettings:
    return SampleSettings(True, cfg.fusion_config(), cfg.layout.infer_local_frames, None)


def check_frames(cfg: ExperimentConfig, ens: Ensemble, frames: int) -> None:
    if frames < 1 or frames % cfg.patch.p3:
        raise ConfigError(f"frames={frames} is not a positive multiple of the temporal patch {cfg.patch.p3}")
    if frames // cfg.patch.p3 > ens.params["pos.f"].shape[0]:
        raise ConfigError(f"frames={frames} exceeds video.max_frames={cfg.video.max_frames}")


def sample_video(cfg: ExperimentConfig, ens: Ensemble, mode: str = "vin", frames: int | None = None,
                 seed: int = 0, class_id: int | None = None, settings: SampleSettings | None = None,
                 trace: list | None = None) -> VideoTensor:
    frames = cfg.sample.frames if frames is None else frames
    class_id = cfg.sample.class_id if class_id is None else class_id
    s = settings or default_settings(cfg)
    check_frames(cfg, ens, frames)
    sched = cfg.build_schedule()
    if mode == "vin":
        layout = frame_layout(ens, frames, cfg.layout.chunk_frames, s.local_frames)
        return sample(ens, frames, layout, sched, s.fusion, class_id, seed, use_global=s.use_global,
                      T_s=s.T_s, trace=trace)
    if mode == "full":
        return sample_full(ens, frames, sched, class_id, seed, use_global=s.use_global, T_s=s.T_s)
    if mode == "autoregressive":
        return sample_autoregressive(ens, frames, sched, cfg.sample.autoreg_context, cfg.sample.autoreg_step,
                                     class_id, seed, use_global=s.use_global, T_s=s.T_s)
    raise ConfigError(f"unknown sampling mode {mode!r}; expected one of {', '.join(SAMPLE_MODES)}")


# --- ablations ------------------------------------------------------------------

ABLATIONS: dict[str, Callable[[SampleSettings], SampleSettings]] = {
    "full": lambda s: s,
    "no-global-tokens": lambda s: replace(s, use_global=False),
    "no-fusion": lambda s: replace(s, fusion=FusionConfig("none")),
    "mid-fusion": lambda s: replace(s, fusion=FusionConfig("mid", 35, 15)),
    "late-fusion": lambda s: replace(s, fusion=FusionConfig("late", 20)),
    # Large-model ablations drop 12 context frames to 8 or 10; scaled to the toy's 4.
    "local-frames-2": lambda s: replace(s, local_frames=2),
    "local-frames-3": lambda s: replace(s, local_frames=3),
    "keyframe-0.5s": lambda s: replace(s, T_s=0.5),
    "keyframe-0.2s": lambda s: replace(s, T_s=0.2),
}


def ablation_settings(cfg: ExperimentConfig, mode: str) -> SampleSettings:
    if mode not in ABLATIONS:
        raise ConfigError(f"unknown ablation {mode!r}; expected one of {', '.join(ABLATIONS)}")
    return ABLATIONS[mode](default_settings(cfg))


@dataclass
class AblationRow:
    mode: str
    reports: list[metrics.MetricReport]
    summary: metrics.Aggregate


def evaluate_mode(cfg: ExperimentConfig, ens: Ensemble, mode: str, clips: int | None = None,
                  frames: int | None = None, seed: int = 0) -> AblationRow:
    """Sample ``clips`` videos under an ablation and score them with estimated flow.

    Clip k uses seed ``seed + k`` and cycles through the classes, so every
    mode sees the same noise and prompts.
    """
    settings = ablation_settings(cfg, mode)
    clips = cfg.eval.clips if clips is None else clips
    reports = []
    for k in range(clips):
        video = sample_video(cfg, ens, "vin", frames, seed + k, k % cfg.dit.n_classes, settings)
        reports.append(metrics.evaluate(video, c=cfg.eval.c))
    return AblationRow(mode, reports, metrics.aggregate(reports))


def ablation_table(rows: list[AblationRow]) -> str:
    head = f"{'mode':<18} {'MAWE':>10} {'W':>10} {'OFS':>8} {'cuts':>6} {'undef':>6}"
    lines = [head]
    for r in rows:
        s = r.summary
        lines.append(f"{r.mode:<18} {s.mawe:>10.4f} {s.warp_error:>10.5f} {s.flow_strength:>8.4f} "
                     f"{s.scene_cuts:>6.2f} {s.mawe_undefined:>6d}")
    return "\n".join(lines) + "\n"
