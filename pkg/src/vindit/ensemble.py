"""Parameters and forward wiring for the VIN + DiT pair."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numcore as nc
from .dit import ConditioningBundle, DiTConfig, Params, condition, denoise_chunk, init_dit, sinusoid
from .numcore import Tensor
from .patchio import PatchSpec, PositionalTables, embed_rows, grid_index, keyframe_rows
from .vin import VINConfig, init_vin, vin_forward


@dataclass
class Ensemble:
    patch: PatchSpec
    dit: DiTConfig
    vin: VINConfig
    H: int
    W: int
    C: int = 1
    max_frames: int = 128
    fps: float = 16.0
    params: Params = field(default_factory=dict)

    @classmethod
    def init(cls, seed: int, patch: PatchSpec, dit: DiTConfig, vin: VINConfig, H: int, W: int,
             C: int = 1, max_frames: int = 128, fps: float = 16.0) -> "Ensemble":
        if not patch.d == dit.d == vin.d:
            raise ValueError(f"widths differ: patch {patch.d}, dit {dit.d}, vin {vin.d}")
        ens = cls(patch, dit, vin, H, W, C, max_frames, fps)
        gh, gw, gf = patch.grid(H, W, max_frames)
        P = patch.voxel * C
        d = patch.d
        rng = np.random.default_rng(seed)
        p: Params = {
            "patch.w": Tensor(rng.standard_normal((P, d)) / math.sqrt(P), requires_grad=True),
            "patch.b": Tensor(np.zeros(d), requires_grad=True),
            "pos.h": Tensor(0.1 * rng.standard_normal((gh, d)), requires_grad=True),
            "pos.w": Tensor(0.1 * rng.standard_normal((gw, d)), requires_grad=True),
            "pos.f": Tensor(0.5 * np.stack([sinusoid(f, d, 1000.0) for f in range(gf)]), requires_grad=True),
        }
        p.update(init_dit(rng, dit, P))
        p.update(init_vin(rng, vin))
        ens.params = p
        return ens

    @property
    def voxel_width(self) -> int:
        return self.patch.voxel * self.C

    @property
    def tokens_per_frame(self) -> int:
        return self.patch.tokens_per_frame(self.H, self.W)

    def num_tokens(self, F: int) -> int:
        gh, gw, gf = self.patch.grid(self.H, self.W, F)
        return gh * gw * gf

    def index_map(self, F: int) -> np.ndarray:
        grid = self.patch.grid(self.H, self.W, F)
        if grid[2] > self.params["pos.f"].shape[0]:
            raise ValueError(f"{F} frames exceed the positional table ({self.max_frames} frames)")
        return grid_index(*grid)

    def names(self) -> list[str]:
        return sorted(self.params)

    def positions(self) -> PositionalTables:
        p = self.params
        return PositionalTables(p["pos.h"], p["pos.w"], p["pos.f"])

    def tokenize(self, rows, index_map: np.ndarray) -> Tensor:
        p = self.params
        return embed_rows(rows, index_map, p["patch.w"], self.positions(), p["patch.b"])

    def condition(self, class_id: int | None, t: int) -> ConditioningBundle:
        return condition(class_id, t, self.params, self.dit)

    def keyframe_rows(self, index_map: np.ndarray, T_s: float | None = None) -> np.ndarray:
        return keyframe_rows(index_map, self.patch.p3, self.fps, self.vin.T_s if T_s is None else T_s)

    def global_tokens(self, X: Tensor, index_map: np.ndarray, cond: ConditioningBundle,
                      use_global: bool = True, T_s: float | None = None) -> Tensor:
        """Z_t from the keyframe tokens of ``X``; zero rows when ``use_global`` is off."""
        if not use_global:
            return Tensor(np.zeros((self.vin.N_global, self.vin.d)))
        keys = nc.take_rows(X, self.keyframe_rows(index_map, T_s))
        return vin_forward(keys, cond.time, cond.text, self.params, self.vin)

    def denoise(self, x_chunk, x_local, z, cond: ConditioningBundle) -> Tensor:
        return denoise_chunk(x_chunk, x_local, z, cond, self.params, self.dit)
