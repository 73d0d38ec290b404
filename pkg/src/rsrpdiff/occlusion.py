"""Knife-edge diffraction and the normalized occlusion factor."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import PolygonScene, los_blockers
from .mapio import BaseStation, Trajectory

KNIFE_EDGE_CUTOFF = -0.7


@dataclass(frozen=True)
class OcclusionConfig:
    L_shadow: float = 50.0
    B_max: float = 40.0
    K_dB: float = 20.0

    def __post_init__(self):
        for name in ("L_shadow", "B_max", "K_dB"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "OcclusionConfig":
        mapping = {"L_shadow_m": "L_shadow", "B_max_dB": "B_max", "K_dB": "K_dB"}
        return cls(**{mapping[k]: float(v) for k, v in d.items() if k in mapping})


@dataclass(frozen=True)
class OcclusionSeries:
    e_of: np.ndarray
    n_blockers: np.ndarray
    max_B: np.ndarray
    argmax_id: np.ndarray  # -1 where no blocker contributes
    max_L_d: Optional[np.ndarray] = None  # largest unweighted knife-edge loss per step

    @property
    def T(self) -> int:
        return len(self.e_of)


def knife_edge_loss(v: float) -> float:
    """Single knife-edge diffraction loss in dB (zero for v <= -0.7)."""
    if v <= KNIFE_EDGE_CUTOFF:
        return 0.0
    if math.isinf(v):
        return math.inf
    w = v - 0.1
    return 6.9 + 20.0 * math.log10(math.sqrt(w * w + 1.0) + w)


def blocker_contribution(L_d: float, d_ue: float, config: OcclusionConfig = OcclusionConfig()) -> float:
    if d_ue < 0:
        raise ValueError("d_ue must be non-negative")
    if L_d == 0:
        return 0.0
    return L_d * math.exp(-d_ue / config.L_shadow)


def occlusion_from_blockers(blockers, config: OcclusionConfig = OcclusionConfig()) -> tuple:
    """(e_of, max_B, argmax id) for one step's blocker list."""
    best, best_id = 0.0, -1
    for g in blockers:
        if g.delta_h <= 0:
            continue
        b = blocker_contribution(knife_edge_loss(g.v), g.d_ue, config)
        if b > best:
            best, best_id = b, g.building_id
    return math.exp(-min(best, config.B_max) / config.K_dB), best, best_id


def occlusion_factor(scene: PolygonScene, bs_pos3d, trajectory_points3d, f_c: float,
                     config: OcclusionConfig = OcclusionConfig()) -> OcclusionSeries:
    """Occlusion factor for each UE position (rows of ``trajectory_points3d``)."""
    ue = np.asarray(trajectory_points3d, dtype=np.float64)
    T = len(ue)
    e = np.empty(T)
    n = np.zeros(T, dtype=np.int64)
    mb = np.zeros(T)
    am = np.full(T, -1, dtype=np.int64)
    ld = np.zeros(T)
    for t in range(T):
        blockers = los_blockers(scene, bs_pos3d, ue[t], f_c)
        n[t] = len(blockers)
        e[t], mb[t], am[t] = occlusion_from_blockers(blockers, config)
        ld[t] = max((knife_edge_loss(g.v) for g in blockers if g.delta_h > 0), default=0.0)
    return OcclusionSeries(e, n, mb, am, ld)


def trajectory_points3d(trajectory: Trajectory, h_r: np.ndarray) -> np.ndarray:
    return np.column_stack([trajectory.points, h_r])


def write_e_of_csv(series: OcclusionSeries, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,e_of,n_blockers,max_B_dB\n")
        for t in range(series.T):
            fh.write(f"{t},{float(series.e_of[t])!r},{int(series.n_blockers[t])},{float(series.max_B[t])!r}\n")
