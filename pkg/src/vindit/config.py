"""Experiment configuration as flat ``section.key = value`` text.

Serialization is canonical (fixed key order, ``repr`` floats), so
``dumps(loads(dumps(cfg))) == dumps(cfg)`` byte for byte.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .diffusion import FusionConfig, NoiseSchedule, build_schedule
from .dit import DiTConfig
from .ensemble import Ensemble
from .patchio import DatasetSpec, PatchSpec
from .vin import VINConfig


class ConfigValidationError(ValueError):
    def __init__(self, problems: dict[str, str]):
        self.problems = problems
        detail = "; ".join(f"{k}: {v}" for k, v in problems.items())
        super().__init__(f"invalid config keys [{', '.join(problems)}] ({detail})")


@dataclass(frozen=True)
class VideoSection:
    H: int = 16
    W: int = 16
    C: int = 1
    max_frames: int = 128
    fps: float = 16.0


@dataclass(frozen=True)
class LayoutSection:
    chunk_frames: int = 10
    local_frames: int = 4
    infer_local_frames: int = 4


@dataclass(frozen=True)
class ScheduleSection:
    T: int = 50
    beta_start: float = 2e-3
    beta_end: float = 0.4


@dataclass(frozen=True)
class FusionSection:
    mode: str = "early"
    t_alpha: int = 20
    t_beta: int = 0  # 0 means unset


@dataclass(frozen=True)
class OptimSection:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 2000
    batch: int = 1
    checkpoint_every: int = 500


@dataclass(frozen=True)
class SampleSection:
    frames: int = 40
    class_id: int = 0
    autoreg_context: int = 6
    autoreg_step: int = 4


@dataclass(frozen=True)
class EvalSection:
    clips: int = 10
    delta_frames: int = 16
    c: float = 9.5


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "runs/toy"


def _toy_patch() -> PatchSpec:
    return PatchSpec(4, 4, 1, 64)


@dataclass(frozen=True)
class ExperimentConfig:
    patch: PatchSpec = field(default_factory=_toy_patch)
    dit: DiTConfig = field(default_factory=DiTConfig)
    vin: VINConfig = field(default_factory=VINConfig)
    video: VideoSection = field(default_factory=VideoSection)
    layout: LayoutSection = field(default_factory=LayoutSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    fusion: FusionSection = field(default_factory=FusionSection)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    optim: OptimSection = field(default_factory=OptimSection)
    sample: SampleSection = field(default_factory=SampleSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def build_ensemble(self) -> Ensemble:
        v = self.video
        return Ensemble.init(self.run.seed, self.patch, self.dit, self.vin, v.H, v.W, v.C, v.max_frames, v.fps)

    def build_schedule(self) -> NoiseSchedule:
        s = self.schedule
        return build_schedule(s.T, s.beta_start, s.beta_end)

    def fusion_config(self) -> FusionConfig:
        f = self.fusion
        return FusionConfig(f.mode, f.t_alpha, f.t_beta or None)

    def digest(self) -> bytes:
        return hashlib.sha256(dumps(self).encode()).digest()


SECTIONS = tuple(f.name for f in fields(ExperimentConfig))


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    return str(v)


def _parse(raw: str, like):
    if isinstance(like, bool):
        if raw not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw == "true"
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    if isinstance(like, tuple):
        items = [s.strip() for s in raw.split(",")] if raw.strip() else []
        proto = like[0] if like else ""
        return tuple(_parse(s, proto) for s in items)
    return raw


def dumps(cfg: ExperimentConfig) -> str:
    lines = []
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for f in fields(obj):
            lines.append(f"{sec}.{f.name} = {_format(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def loads(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse config text. Keys not given keep the values of ``base`` (defaults)."""
    base = base or ExperimentConfig()
    updates: dict[str, dict] = {s: {} for s in SECTIONS}
    problems: dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep:
            problems[f"line {n}"] = "expected 'section.key = value'"
            continue
        sec, _, name = key.partition(".")
        if sec not in updates or name not in {f.name for f in fields(getattr(base, sec))}:
            problems[key] = "unknown key"
            continue
        try:
            updates[sec][name] = _parse(raw, getattr(getattr(base, sec), name))
        except ValueError as e:
            problems[key] = str(e)
    if problems:
        raise ConfigValidationError(problems)
    built = {}
    for sec in SECTIONS:
        try:
            built[sec] = replace(getattr(base, sec), **updates[sec])
        except ValueError as e:
            problems[sec] = str(e)
    if problems:
        raise ConfigValidationError(problems)
    cfg = ExperimentConfig(**built)
    validate(cfg)
    return cfg


def validate(cfg: ExperimentConfig) -> None:
    problems = {}
    if not cfg.patch.d == cfg.dit.d == cfg.vin.d:
        problems["patch.d"] = f"widths differ: patch {cfg.patch.d}, dit {cfg.dit.d}, vin {cfg.vin.d}"
    if cfg.dit.T != cfg.schedule.T:
        problems["dit.T"] = f"dit.T={cfg.dit.T} but schedule.T={cfg.schedule.T}"
    if cfg.dit.n_classes != cfg.data.n_classes:
        problems["dit.n_classes"] = f"dataset has {cfg.data.n_classes} classes"
    if (cfg.data.H, cfg.data.W) != (cfg.video.H, cfg.video.W):
        problems["data.H"] = "dataset frame size differs from video.H x video.W"
    if cfg.video.C != 1:
        problems["video.C"] = "the synthetic dataset is single-channel"
    lay = cfg.layout
    if lay.chunk_frames < 1 or lay.local_frames < 0 or lay.infer_local_frames < 0:
        problems["layout.chunk_frames"] = "chunk frames must be >= 1 and local frames >= 0"
    elif max(lay.local_frames, lay.infer_local_frames) > lay.chunk_frames:
        problems["layout.local_frames"] = "local context longer than a chunk"
    o = cfg.optim
    if o.steps < 0:
        problems["optim.steps"] = "must be >= 0"
    for key, val in (("optim.batch", o.batch), ("optim.checkpoint_every", o.checkpoint_every),
                     ("eval.clips", cfg.eval.clips), ("optim.lr", o.lr), ("optim.eps", o.eps), ("eval.c", cfg.eval.c)):
        if val <= 0:
            problems[key] = f"must be positive, got {val}"
    for key, val in (("optim.beta1", o.beta1), ("optim.beta2", o.beta2)):
        if not 0 <= val < 1:
            problems[key] = f"must lie in [0, 1), got {val}"
    try:
        cfg.fusion_config()
    except ValueError as e:
        problems["fusion.mode"] = str(e)
    if problems:
        raise ConfigValidationError(problems)


def load(path) -> ExperimentConfig:
    return loads(Path(path).read_text())


def save(path, cfg: ExperimentConfig) -> None:
    Path(path).write_text(dumps(cfg))
