"""Video <-> token conversion, keyframe selection, synthetic clips, file I/O.

Layout conventions used throughout the package:

* a video is an ``(H, W, F, C)`` float64 array;
* a voxel is ``p1 x p2 x p3`` pixels by ``C`` channels, flattened in
  ``(h, w, f, c)`` order into a row of width ``P = p1*p2*p3*C``;
* tokens are ordered by temporal slice first, then grid row, then grid
  column, so every frame group is a contiguous block of rows.

The diffusion state is kept as voxel rows (``N x P``); :func:`voxel_rows` and
:func:`video_from_rows` convert losslessly.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .metrics import FlowField, consistency_mask, in_frame_mask  # noqa: F401  (re-exported)

MAGIC = b"VINV"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIId")


class PatchError(ValueError):
    pass


class KeyframeError(ValueError):
    pass


class VideoFormatError(ValueError):
    pass


class VideoLengthError(VideoFormatError):
    pass


@dataclass(frozen=True)
class PatchSpec:
    p1: int = 2
    p2: int = 2
    p3: int = 1
    d: int = 64

    @property
    def voxel(self) -> int:
        return self.p1 * self.p2 * self.p3

    def grid(self, H: int, W: int, F: int) -> tuple[int, int, int]:
        if H % self.p1 or W % self.p2 or F % self.p3:
            raise PatchError(
                f"video extents (H={H}, W={W}, F={F}) not divisible by patch "
                f"({self.p1}, {self.p2}, {self.p3})"
            )
        return H // self.p1, W // self.p2, F // self.p3

    def tokens_per_frame(self, H: int, W: int) -> int:
        gh, gw, _ = self.grid(H, W, self.p3)
        return gh * gw


@dataclass
class VideoTensor:
    values: np.ndarray
    fps: float = 16.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 4:
            raise PatchError(f"video must be H x W x F x C, got shape {self.values.shape}")
        if self.fps <= 0:
            raise PatchError(f"fps must be positive, got {self.fps}")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    H = property(lambda self: self.values.shape[0])
    W = property(lambda self: self.values.shape[1])
    F = property(lambda self: self.values.shape[2])
    C = property(lambda self: self.values.shape[3])


@dataclass
class TokenSequence:
    """Token matrix plus the (h, w, f) grid coordinate of every row."""

    tokens: nc.Tensor
    index_map: np.ndarray
    grid: tuple[int, int, int]
    p3: int = 1

    @property
    def frame_group(self) -> np.ndarray:
        return self.index_map[:, 2]

    def __len__(self):
        return len(self.index_map)


def grid_index(gh: int, gw: int, gf: int) -> np.ndarray:
    """(N, 3) array of (h, w, f) grid coordinates in token order."""
    f, h, w = np.meshgrid(np.arange(gf), np.arange(gh), np.arange(gw), indexing="ij")
    return np.stack([h.ravel(), w.ravel(), f.ravel()], axis=1)


def voxel_rows(values: np.ndarray, spec: PatchSpec) -> np.ndarray:
    """Rearrange an ``(H, W, F, C)`` array into ``(N, P)`` voxel rows."""
    H, W, F, C = values.shape
    gh, gw, gf = spec.grid(H, W, F)
    x = values.reshape(gh, spec.p1, gw, spec.p2, gf, spec.p3, C)
    x = x.transpose(4, 0, 2, 1, 3, 5, 6)
    return x.reshape(gf * gh * gw, spec.voxel * C)


def video_from_rows(rows: np.ndarray, spec: PatchSpec, H: int, W: int, F: int) -> np.ndarray:
    gh, gw, gf = spec.grid(H, W, F)
    C = rows.shape[1] // spec.voxel
    x = np.asarray(rows).reshape(gf, gh, gw, spec.p1, spec.p2, spec.p3, C)
    x = x.transpose(1, 3, 2, 4, 0, 5, 6)
    return x.reshape(H, W, F, C)


@dataclass
class PositionalTables:
    """Learned additive position embeddings, factorized per grid axis."""

    h: nc.Tensor
    w: nc.Tensor
    f: nc.Tensor

    def rows(self, index_map: np.ndarray) -> nc.Tensor:
        return nc.add(
            nc.add(nc.take_rows(self.h, index_map[:, 0]), nc.take_rows(self.w, index_map[:, 1])),
            nc.take_rows(self.f, index_map[:, 2]),
        )


def embed_rows(
    rows, index_map: np.ndarray, proj, pos: PositionalTables | None = None, bias=None
) -> nc.Tensor:
    """Project voxel rows to width d and add positional terms."""
    out = nc.matmul(rows, proj)
    if bias is not None:
        out = nc.add(out, bias)
    if pos is not None:
        out = nc.add(out, pos.rows(index_map))
    return out


def patchify(
    v: VideoTensor, spec: PatchSpec, proj, pos: PositionalTables | None = None, bias=None
) -> TokenSequence:
    """Tokenize a video: flatten voxels, multiply by ``proj``, add positions."""
    grid = spec.grid(v.H, v.W, v.F)
    index_map = grid_index(*grid)
    rows = voxel_rows(v.values, spec)
    proj = nc.as_tensor(proj)
    if proj.shape[0] != rows.shape[1]:
        raise PatchError(f"projection expects rows of width {proj.shape[0]}, voxels are {rows.shape[1]}")
    return TokenSequence(embed_rows(rows, index_map, proj, pos, bias), index_map, grid, spec.p3)


def unpatchify(ts: TokenSequence, spec: PatchSpec, proj_out, fps: float = 16.0) -> VideoTensor:
    """Project tokens back to voxels and reassemble the video."""
    gh, gw, gf = ts.grid
    n = gh * gw * gf
    idx = np.asarray(ts.index_map)
    flat = (idx[:, 2] * gh + idx[:, 0]) * gw + idx[:, 1] if len(idx) else idx
    if len(idx) != n or len(np.unique(flat)) != n:
        raise PatchError(f"index map covers {len(np.unique(flat))} of {n} grid cells")
    voxels = nc.matmul(ts.tokens, proj_out).data
    ordered = np.empty_like(voxels)
    ordered[flat] = voxels
    return VideoTensor(
        video_from_rows(ordered, spec, gh * spec.p1, gw * spec.p2, gf * spec.p3), fps=fps
    )


def keyframe_stride(fps: float, T_s: float) -> int:
    if T_s <= 0:
        raise KeyframeError(f"keyframe interval must be positive, got {T_s}")
    return max(1, int(math.floor(fps * T_s + 0.5)))


def keyframe_slices(n_slices: int, p3: int, fps: float, T_s: float) -> np.ndarray:
    """Temporal slice indices holding frames 0, s, 2s, ... (s = stride)."""
    stride = keyframe_stride(fps, T_s)
    frames = np.arange(0, n_slices * p3, stride)
    return np.unique(frames // p3)


def keyframe_rows(index_map: np.ndarray, p3: int, fps: float, T_s: float) -> np.ndarray:
    """Row indices of keyframe tokens; frames count from the first slice present."""
    if len(index_map) == 0:
        raise KeyframeError("no tokens to sub-sample")
    rel = index_map[:, 2] - index_map[:, 2].min()
    keep = np.isin(rel, keyframe_slices(int(rel.max()) + 1, p3, fps, T_s))
    return np.flatnonzero(keep)


def subsample_keyframes(ts: TokenSequence, fps: float, T_s: float) -> TokenSequence:
    rows = keyframe_rows(ts.index_map, ts.p3, fps, T_s)
    return TokenSequence(nc.take_rows(ts.tokens, rows), ts.index_map[rows], ts.grid, ts.p3)


# --- synthetic data ------------------------------------------------------

DIRECTIONS = {"right": (1, 0), "left": (-1, 0), "down": (0, 1), "up": (0, -1)}
SHAPES = ("square", "disc", "bar")


@dataclass(frozen=True)
class DatasetSpec:
    clips: int = 256
    H: int = 16
    W: int = 16
    F: int = 40
    fps: float = 16.0
    directions: tuple[str, ...] = ("right", "left", "down", "up")
    speeds: tuple[int, ...] = (1, 2)
    shapes: tuple[str, ...] = SHAPES
    colors: tuple[float, ...] = (0.9, 0.4, -0.2)
    background: float = -0.8
    seed: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.directions) * len(self.speeds)

    def motion(self, class_id: int) -> tuple[int, int]:
        """Velocity (vx, vy) in pixels per frame for a class id."""
        direction = self.directions[class_id // len(self.speeds)]
        speed = self.speeds[class_id % len(self.speeds)]
        ux, uy = DIRECTIONS[direction]
        return ux * speed, uy * speed


def _shape_mask(kind: str, size: int) -> np.ndarray:
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "disc":
        c = (size - 1) / 2.0
        yy, xx = np.mgrid[0:size, 0:size]
        return (yy - c) ** 2 + (xx - c) ** 2 <= (size / 2.0) ** 2
    if kind == "bar":
        m = np.zeros((size, size), dtype=bool)
        m[size // 3 : size - size // 3, :] = True
        return m
    raise ValueError(f"unknown shape {kind!r}")


def _render(spec: DatasetSpec, sprites, F: int):
    """Draw sprites moving on a torus; later sprites cover earlier ones."""
    H, W = spec.H, spec.W
    frames = np.full((H, W, F, 1), spec.background)
    owner = np.full((H, W, F), -1, dtype=int)
    for k, (mask, color, (x0, y0), (vx, vy)) in enumerate(sprites):
        ys, xs = np.nonzero(mask)
        for f in range(F):
            py = (ys + y0 + vy * f) % H
            px = (xs + x0 + vx * f) % W
            frames[py, px, f, 0] = color
            owner[py, px, f] = k
    return frames, owner


def _sprites(spec: DatasetSpec, i: int):
    rng = np.random.default_rng([spec.seed, i])
    class_id = int(i % spec.n_classes)
    velocity = spec.motion(class_id)
    sprites = []
    for _ in range(int(rng.integers(1, 3))):
        size = int(rng.integers(3, max(4, min(spec.H, spec.W) // 2) + 1))
        kind = spec.shapes[int(rng.integers(len(spec.shapes)))]
        color = spec.colors[int(rng.integers(len(spec.colors)))]
        origin = (int(rng.integers(spec.W)), int(rng.integers(spec.H)))
        sprites.append((_shape_mask(kind, size), color, origin, velocity))
    return class_id, sprites


def generate_synthetic(spec: DatasetSpec, i: int):
    """Clip ``i`` of the moving-shapes set.

    Returns ``(video, class_id, flows)`` where ``flows[f]`` is the ground-truth
    forward flow from frame ``f`` to ``f + 1`` (shape pixels move with the class
    velocity, background stays put).
    """
    if not 0 <= i < spec.clips:
        raise IndexError(f"clip index {i} outside [0, {spec.clips})")
    class_id, sprites = _sprites(spec, i)
    values, owner = _render(spec, sprites, spec.F)
    vx, vy = spec.motion(class_id)
    flows = []
    for f in range(spec.F - 1):
        moving = owner[:, :, f] >= 0
        back_moving = owner[:, :, f + 1] >= 0
        dx, dy = np.where(moving, vx, 0.0), np.where(moving, vy, 0.0)
        bx, by = np.where(back_moving, -vx, 0.0), np.where(back_moving, -vy, 0.0)
        flows.append(FlowField(dx, dy, consistency_mask((dx, dy), (bx, by))))
    return VideoTensor(values, fps=spec.fps), class_id, flows


def translating_texture(H: int, W: int, F: int, vx: int, vy: int, seed: int = 0, fps: float = 16.0):
    """Whole-frame random texture translating by (vx, vy) pixels per frame.

    Every pixel is textured, so block matching has a unique optimum. Returns
    ``(video, flows)`` with exact integer ground-truth flow.
    """
    rng = np.random.default_rng(seed)
    pad_y, pad_x = abs(vy) * (F - 1), abs(vx) * (F - 1)
    canvas = rng.uniform(-1.0, 1.0, size=(H + pad_y, W + pad_x))
    oy = pad_y if vy > 0 else 0
    ox = pad_x if vx > 0 else 0
    values = np.empty((H, W, F, 1))
    for f in range(F):
        y, x = oy - vy * f, ox - vx * f
        values[:, :, f, 0] = canvas[y : y + H, x : x + W]
    dx, dy = np.full((H, W), float(vx)), np.full((H, W), float(vy))
    flows = [FlowField(dx, dy) for _ in range(F - 1)]
    return VideoTensor(values, fps=fps), flows


# --- file format ---------------------------------------------------------


def write_video(path, v: VideoTensor) -> None:
    """Little-endian: magic, u32 version, u32 H W F C, f64 fps, f64 payload."""
    H, W, F, C = v.shape
    payload = np.ascontiguousarray(v.values, dtype="<f8").tobytes()
    Path(path).write_bytes(_HEADER.pack(MAGIC, VERSION, H, W, F, C, float(v.fps)) + payload)


def read_video(path) -> VideoTensor:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise VideoLengthError(f"{path}: {len(raw)} bytes is shorter than the header")
    magic, version, H, W, F, C, fps = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise VideoFormatError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VideoFormatError(f"{path}: unsupported version {version}")
    expected = H * W * F * C * 8
    body = raw[_HEADER.size :]
    if len(body) != expected:
        raise VideoLengthError(
            f"{path}: header says {H}x{W}x{F}x{C} ({expected} bytes), payload has {len(body)}"
        )
    values = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(H, W, F, C)
    return VideoTensor(values, fps=fps)


def export_png_frames(v: VideoTensor, directory, lo: float = -1.0, hi: float = 1.0) -> list[Path]:
    """Lossy 8-bit per-frame PNGs for eyeballing; not read back anywhere."""
    from PIL import Image

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    scaled = np.clip((v.values - lo) / (hi - lo), 0.0, 1.0) * 255.0
    for f in range(v.F):
        frame = scaled[:, :, f, :].round().astype(np.uint8)
        img = Image.fromarray(frame[:, :, 0] if v.C == 1 else frame[:, :, :3])
        p = out / f"frame_{f:04d}.png"
        img.save(p)
        paths.append(p)
    return paths
