"""Optical-flow consistency metrics: warp error, flow strength, MAWE, scene cuts.

Flow comes from an exhaustive block matcher (:func:`estimate_flow`) or, for
synthetic clips, from the generator's ground truth. Flow convention: ``dx``
runs along width, ``dy`` along height, and frame ``f`` content at ``p`` shows
up in frame ``f + 1`` at ``p + flow(p)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAWE_C = 9.5
OFS_FLOOR = 1e-6


class MetricError(ValueError):
    pass


class UndefinedMetricError(MetricError):
    pass


class _StaticVideo:
    """Sentinel for MAWE on a video with (near-)zero flow."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "undefined (static video)"

    __str__ = __repr__

    def __bool__(self):
        return False


UNDEFINED = _StaticVideo()


def is_undefined(x) -> bool:
    return x is UNDEFINED


@dataclass
class FlowField:
    """Per-pixel displacement to the next frame, plus a usability mask."""

    dx: np.ndarray
    dy: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.dx = np.asarray(self.dx, dtype=np.float64)
        self.dy = np.asarray(self.dy, dtype=np.float64)
        if self.mask is None:
            self.mask = in_frame_mask(self.dx, self.dy)

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.dx, self.dy)


def in_frame_mask(dx: np.ndarray, dy: np.ndarray) -> np.ndarray:
    H, W = dx.shape
    ys, xs = np.mgrid[0:H, 0:W]
    tx, ty = xs + dx, ys + dy
    return (tx >= 0) & (tx <= W - 1) & (ty >= 0) & (ty <= H - 1)


def consistency_mask(fwd, bwd, tol: float = 1.0) -> np.ndarray:
    """In-frame pixels whose forward-then-backward round trip stays within ``tol`` px."""
    dx, dy = fwd
    bx, by = bwd
    H, W = dx.shape
    ys, xs = np.mgrid[0:H, 0:W]
    tx = np.clip(np.rint(xs + dx).astype(int), 0, W - 1)
    ty = np.clip(np.rint(ys + dy).astype(int), 0, H - 1)
    round_trip = np.hypot(dx + bx[ty, tx], dy + by[ty, tx])
    return in_frame_mask(dx, dy) & (round_trip <= tol)


def _frames(video) -> np.ndarray:
    values = np.asarray(getattr(video, "values", video), dtype=np.float64)
    if values.ndim == 3:
        values = values[..., None]
    if values.ndim != 4:
        raise MetricError(f"expected an H x W x F x C video, got shape {values.shape}")
    return values


def _as_hwc(frame) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    return frame[..., None] if frame.ndim == 2 else frame


def _block_search(a: np.ndarray, b: np.ndarray, block: int, radius: int):
    H, W, _ = a.shape
    nby, nbx = H // block, W // block
    pad = np.pad(b, ((radius, radius), (radius, radius), (0, 0)), constant_values=np.nan)
    # Zero first, then by distance, then lexicographic (dy, dx).
    cands = sorted(
        ((dy, dx) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)),
        key=lambda c: (c[0] ** 2 + c[1] ** 2, c[0], c[1]),
    )
    best = np.full((nby, nbx), np.inf)
    bdy = np.zeros((nby, nbx))
    bdx = np.zeros((nby, nbx))
    for dy, dx in cands:
        shifted = pad[radius + dy : radius + dy + H, radius + dx : radius + dx + W]
        sq = ((shifted - a) ** 2).sum(axis=2)
        ssd = sq.reshape(nby, block, nbx, block).sum(axis=(1, 3))
        better = ssd < best  # NaN (target leaves the frame) never wins
        best = np.where(better, ssd, best)
        bdy = np.where(better, dy, bdy)
        bdx = np.where(better, dx, bdx)
    expand = np.ones((block, block))
    return np.kron(bdx, expand), np.kron(bdy, expand)


def estimate_flow(a, b, block: int = 4, radius: int = 4, consistency_tol: float | None = 1.0) -> FlowField:
    """Exhaustive SSD block matching from frame ``a`` to frame ``b``.

    Each ``block x block`` tile of ``a`` takes the displacement (within
    ``radius``, target tile fully inside the frame) minimizing the sum of
    squared differences. The mask keeps in-frame targets and, unless
    ``consistency_tol`` is None, drops pixels failing a forward-backward check.
    """
    if radius < 0:
        raise MetricError(f"search radius must be >= 0, got {radius}")
    a, b = _as_hwc(a), _as_hwc(b)
    if a.shape != b.shape:
        raise MetricError(f"frame shapes differ: {a.shape} vs {b.shape}")
    H, W, _ = a.shape
    if block < 1 or H % block or W % block:
        raise MetricError(f"block {block} does not divide frame {H}x{W}")
    dx, dy = _block_search(a, b, block, radius)
    if consistency_tol is None:
        return FlowField(dx, dy)
    bx, by = _block_search(b, a, block, radius)
    return FlowField(dx, dy, consistency_mask((dx, dy), (bx, by), consistency_tol))


def estimate_flows(video, block: int = 4, radius: int = 4, consistency_tol: float | None = 1.0) -> list[FlowField]:
    v = _frames(video)
    return [
        estimate_flow(v[:, :, f], v[:, :, f + 1], block, radius, consistency_tol)
        for f in range(v.shape[2] - 1)
    ]


def sample_bilinear(frame: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample an H x W x C frame at real coordinates (assumed inside the frame)."""
    H, W, _ = frame.shape
    x0 = np.clip(np.floor(x).astype(int), 0, W - 1)
    y0 = np.clip(np.floor(y).astype(int), 0, H - 1)
    x1, y1 = np.minimum(x0 + 1, W - 1), np.minimum(y0 + 1, H - 1)
    fx, fy = (x - x0)[..., None], (y - y0)[..., None]
    top = frame[y0, x0] * (1 - fx) + frame[y0, x1] * fx
    bottom = frame[y1, x0] * (1 - fx) + frame[y1, x1] * fx
    return top * (1 - fy) + bottom * fy


def pair_warp_error(a, b, flow: FlowField) -> float:
    """Mean squared L2 distance between ``a`` and ``b`` sampled along the flow; NaN if nothing is valid."""
    a, b = _as_hwc(a), _as_hwc(b)
    mask = flow.mask
    if not mask.any():
        return float("nan")
    ys, xs = np.nonzero(mask)
    warped = sample_bilinear(b, xs + flow.dx[ys, xs], ys + flow.dy[ys, xs])
    return float(((warped - a[ys, xs]) ** 2).sum(axis=-1).mean())


@dataclass
class WarpResult:
    value: float
    per_pair: np.ndarray  # NaN where a pair was fully occluded


def warp_error(video, flows) -> WarpResult:
    v = _frames(video)
    if len(flows) != v.shape[2] - 1:
        raise MetricError(f"{len(flows)} flows for {v.shape[2]} frames")
    per = np.array([pair_warp_error(v[:, :, f], v[:, :, f + 1], fl) for f, fl in enumerate(flows)])
    valid = ~np.isnan(per)
    if not valid.any():
        raise UndefinedMetricError("every frame pair is fully occluded")
    return WarpResult(float(per[valid].mean()), per)


def flow_strength_series(flows) -> np.ndarray:
    return np.array([fl.magnitude.mean() for fl in flows])


def flow_strength(flows) -> float:
    """Mean flow magnitude over all pixels of all pairs."""
    if len(flows) == 0:
        raise MetricError("flow strength needs at least one flow field")
    return float(np.mean([fl.magnitude for fl in flows]))


dynamic_degree = flow_strength


def mawe_from(W: float, ofs: float, c: float = MAWE_C):
    if c <= 0:
        raise MetricError(f"calibration constant must be positive, got {c}")
    if ofs < OFS_FLOOR:
        return UNDEFINED
    return W / (c * ofs)


def mawe(video, flows, c: float = MAWE_C):
    """W(V) / (c * OFS(V)), or :data:`UNDEFINED` when OFS is below the floor."""
    ofs = flow_strength(flows)
    if ofs < OFS_FLOOR:
        return mawe_from(0.0, ofs, c)
    return mawe_from(warp_error(video, flows).value, ofs, c)


@dataclass
class SceneCuts:
    count: int
    rate: float  # cuts per frame transition
    flags: np.ndarray  # per transition f -> f+1
    differences: np.ndarray


def detect_scene_cuts(video, threshold: float = 3.0, window: int = 7, floor: float = 1e-6) -> SceneCuts:
    """Flag transition f -> f+1 when its mean absolute difference exceeds
    ``threshold`` times the rolling median of differences in a centred window.

    Clips with fewer transitions than ``window`` compare against the global mean
    instead. ``floor`` suppresses cuts on differences that are numerically zero.
    """
    if threshold <= 0:
        raise MetricError(f"threshold must be positive, got {threshold}")
    v = _frames(video)
    diffs = np.abs(np.diff(v, axis=2)).mean(axis=(0, 1, 3))
    n = diffs.size
    if n == 0:
        return SceneCuts(0, 0.0, np.zeros(0, dtype=bool), diffs)
    if n < window:
        ref = np.full(n, diffs.mean())
    else:
        half = window // 2
        ref = np.array([np.median(diffs[max(0, i - half) : i + half + 1]) for i in range(n)])
    flags = (diffs > threshold * ref) & (diffs > floor)
    return SceneCuts(int(flags.sum()), float(flags.sum() / n), flags, diffs)


# --- reports --------------------------------------------------------------

REPORT_KEYS = ("frames", "pairs", "warp_error", "flow_strength", "mawe", "scene_cuts", "scene_cut_rate", "dynamic_degree")
SERIES_COLUMNS = ("warp_error", "flow_strength", "mawe", "scene_cut")


@dataclass
class MetricReport:
    frames: int
    warp_error: float
    flow_strength: float
    mawe: object  # float or UNDEFINED
    scene_cuts: int
    scene_cut_rate: float
    dynamic_degree: float
    series: np.ndarray  # pairs x len(SERIES_COLUMNS)

    @property
    def pairs(self) -> int:
        return self.frames - 1

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in REPORT_KEYS}


def evaluate(video, flows=None, *, c: float = MAWE_C, block: int = 4, radius: int = 4,
             cut_threshold: float = 3.0) -> MetricReport:
    v = _frames(video)
    if flows is None:
        flows = estimate_flows(v, block, radius)
    ofs_series = flow_strength_series(flows)
    ofs = flow_strength(flows)
    try:
        warp = warp_error(v, flows)
        W, w_series = warp.value, warp.per_pair
    except UndefinedMetricError:
        W, w_series = float("nan"), np.full(len(flows), np.nan)
    score = mawe_from(W, ofs, c)
    with np.errstate(divide="ignore", invalid="ignore"):
        m_series = np.where(ofs_series >= OFS_FLOOR, w_series / (c * ofs_series), np.nan)
    cuts = detect_scene_cuts(v, cut_threshold)
    series = np.stack([w_series, ofs_series, m_series, cuts.flags.astype(float)], axis=1)
    return MetricReport(v.shape[2], W, ofs, score, cuts.count, cuts.rate, ofs, series)


def _fmt(x) -> str:
    if is_undefined(x):
        return "undefined"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def format_report(report: MetricReport) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in report.as_dict().items())


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, _, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if raw == "undefined":
            out[key] = UNDEFINED
        elif key in ("frames", "pairs", "scene_cuts"):
            out[key] = int(raw)
        else:
            out[key] = float(raw)
    return out


def write_report(path, report: MetricReport) -> None:
    Path(path).write_text(format_report(report))


def series_video(report: MetricReport):
    """Per-pair series packed as a 1 x 1 x pairs x metrics video tensor."""
    from .patchio import VideoTensor

    return VideoTensor(report.series[None, None, :, :], fps=1.0)


@dataclass
class Aggregate:
    count: int
    warp_error: float
    flow_strength: float
    mawe: float
    mawe_defined: int
    mawe_undefined: int
    scene_cuts: float
    dynamic_degree: float


def aggregate(reports) -> Aggregate:
    """Means across videos; undefined MAWE rows are excluded and counted."""
    reports = list(reports)
    if not reports:
        raise MetricError("nothing to aggregate")
    defined = [r.mawe for r in reports if not is_undefined(r.mawe)]
    return Aggregate(
        count=len(reports),
        warp_error=float(np.nanmean([r.warp_error for r in reports])),
        flow_strength=float(np.mean([r.flow_strength for r in reports])),
        mawe=float(np.mean(defined)) if defined else float("nan"),
        mawe_defined=len(defined),
        mawe_undefined=len(reports) - len(defined),
        scene_cuts=float(np.mean([r.scene_cuts for r in reports])),
        dynamic_degree=float(np.mean([r.dynamic_degree for r in reports])),
    )


# --- chunk transitions --------------------------------------------------------


def boundary_frames(layout) -> list[int]:
    """First frame of every chunk after the first."""
    return [s // layout.tokens_per_frame for s, _ in layout.chunks[1:]]


@dataclass
class TransitionReport:
    boundaries: list[int]
    warp_error: list[float]
    mawe: list
    mean_warp_error: float
    mean_mawe: float


def transition_analysis(video, layout, delta_frames: int = 16, flows=None, c: float = MAWE_C,
                        block: int = 4, radius: int = 4) -> TransitionReport:
    """W and MAWE over the ``delta_frames`` transitions ending at each chunk boundary.

    The window for boundary ``b`` spans frames ``max(0, b - delta) .. b``, so
    it includes the step into the new chunk.
    """
    v = _frames(video)
    if flows is None:
        flows = estimate_flows(v, block, radius)
    bounds = boundary_frames(layout)
    ws, ms = [], []
    for b in bounds:
        lo = max(0, b - delta_frames)
        window, wflows = v[:, :, lo : b + 1], flows[lo:b]
        try:
            w = warp_error(window, wflows).value
        except UndefinedMetricError:
            w = float("nan")
        ws.append(w)
        ms.append(mawe_from(w, flow_strength(wflows), c))
    defined = [m for m in ms if not is_undefined(m)]
    return TransitionReport(
        bounds,
        ws,
        ms,
        float(np.nanmean(ws)) if ws else float("nan"),
        float(np.mean(defined)) if defined else float("nan"),
    )
