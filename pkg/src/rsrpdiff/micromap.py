"""Edge-enhanced map channels, coordinate encoding and per-step FoV crops."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .mapio import MultiAttributeMap, Trajectory


@dataclass(frozen=True)
class EnhancedMap:
    channels: np.ndarray  # (2, H, W): altitude, building height
    cell_size: float
    origin: tuple

    def __post_init__(self):
        if self.channels.ndim != 3 or self.channels.shape[0] != 2:
            raise ValueError("EnhancedMap needs a (2, H, W) array")
        if not np.all(np.isfinite(self.channels)):
            raise ValueError("EnhancedMap values must be finite")

    @property
    def shape(self) -> tuple:
        return self.channels.shape[1:]


@dataclass(frozen=True)
class MicroMapSeries:
    crops: np.ndarray  # (T, 2, S, S)
    fov_l: float
    cell_size: float
    windows: np.ndarray  # (T, 2): top-left (row, col) of each crop, unclipped

    @property
    def T(self) -> int:
        return self.crops.shape[0]

    @property
    def S(self) -> int:
        return self.crops.shape[-1]


def _pad_odd(a: np.ndarray) -> np.ndarray:
    # odd reflection continues affine trends exactly, so borders add no spurious curvature
    p = np.pad(a, 1, mode="edge")
    p[0, 1:-1] = 2 * a[0] - a[1] if a.shape[0] > 1 else a[0]
    p[-1, 1:-1] = 2 * a[-1] - a[-2] if a.shape[0] > 1 else a[-1]
    p[:, 0] = 2 * p[:, 1] - p[:, 2] if a.shape[1] > 1 else p[:, 1]
    p[:, -1] = 2 * p[:, -2] - p[:, -3] if a.shape[1] > 1 else p[:, -2]
    return p


def edge_response(c: np.ndarray) -> np.ndarray:
    """|f_xx| + |f_yy| + 2|f_xy| by central differences (unit spacing)."""
    p = _pad_odd(np.asarray(c, dtype=np.float64))
    mid = p[1:-1, 1:-1]
    fxx = p[1:-1, 2:] - 2 * mid + p[1:-1, :-2]
    fyy = p[2:, 1:-1] - 2 * mid + p[:-2, 1:-1]
    fxy = (p[2:, 2:] - p[2:, :-2] - p[:-2, 2:] + p[:-2, :-2]) / 4.0
    return np.abs(fxx) + np.abs(fyy) + 2 * np.abs(fxy)


def fill_nearest(a: np.ndarray, invalid: np.ndarray) -> np.ndarray:
    if not invalid.any():
        return a
    if invalid.all():
        raise ValueError("no valid cells to fill from")
    idx = ndimage.distance_transform_edt(invalid, return_distances=False, return_indices=True)
    return a[tuple(idx)]


def hessian_enhance(map_: MultiAttributeMap, fill_nodata: bool = False) -> EnhancedMap:
    out = []
    for name, layer in (("altitude", map_.altitude), ("building_height", map_.building_height)):
        layer = np.asarray(layer, dtype=np.float64)
        bad = ~np.isfinite(layer) | map_.nodata
        if bad.any():
            if not fill_nodata:
                raise ValueError(f"{name} has {int(bad.sum())} nodata cells; enable fill_nodata")
            layer = fill_nearest(layer, bad)
        out.append(layer + edge_response(layer))
    return EnhancedMap(np.stack(out), map_.cell_size, tuple(map_.origin))


def _axis(n: int) -> np.ndarray:
    return np.zeros(1) if n == 1 else np.linspace(-1.0, 1.0, n)


def coordinate_encoding(width: int, height: int) -> np.ndarray:
    """(2, height, width): x by column, y by row with the bottom row at -1."""
    if width < 1 or height < 1:
        raise ValueError("width and height must be >= 1")
    xs = _axis(width)
    ys = _axis(height)[::-1]
    return np.stack([np.broadcast_to(xs, (height, width)), np.broadcast_to(ys[:, None], (height, width))]).copy()


def crop_size(fov_l: float, cell_size: float) -> int:
    if fov_l < cell_size:
        raise ValueError(f"fov_l={fov_l} is smaller than one cell ({cell_size})")
    return max(1, int(round(fov_l / cell_size)))


def crop_windows(shape: tuple, cell_size: float, origin: tuple, points: np.ndarray, S: int) -> np.ndarray:
    H, W = shape
    x0, y0 = origin
    pts = np.asarray(points, dtype=np.float64)
    col = np.floor((pts[:, 0] - x0) / cell_size).astype(np.int64)
    row = H - 1 - np.floor((pts[:, 1] - y0) / cell_size).astype(np.int64)
    return np.column_stack([row - S // 2, col - S // 2])


def _gather(grid: np.ndarray, windows: np.ndarray, S: int) -> np.ndarray:
    H, W = grid.shape[-2:]
    off = np.arange(S)
    r = np.clip(windows[:, 0:1] + off, 0, H - 1)  # (T, S)
    c = np.clip(windows[:, 1:2] + off, 0, W - 1)
    return grid[..., r[:, :, None], c[:, None, :]]


def serialize(enhanced: EnhancedMap, trajectory, fov_l: float) -> MicroMapSeries:
    """Crop an S x S window (edge-replicated) around each trajectory point."""
    S = crop_size(fov_l, enhanced.cell_size)
    pts = trajectory.points if isinstance(trajectory, Trajectory) else np.asarray(trajectory)
    win = crop_windows(enhanced.shape, enhanced.cell_size, enhanced.origin, pts, S)
    crops = np.moveaxis(_gather(enhanced.channels, win, S), 1, 0)  # (T, 2, S, S)
    return MicroMapSeries(np.ascontiguousarray(crops), float(fov_l), enhanced.cell_size, win)


def coordinate_crops(enhanced: EnhancedMap, series: MicroMapSeries) -> np.ndarray:
    """The coordinate encoding P cut to the same windows as ``series``."""
    H, W = enhanced.shape
    P = coordinate_encoding(W, H)
    return np.moveaxis(_gather(P, series.windows, series.S), 1, 0)


def write_micromaps(series: MicroMapSeries, path, coords: np.ndarray = None) -> None:
    path = Path(path)
    series.crops.astype("<f4").tofile(path)
    meta = {"T": series.T, "C": 2, "S": series.S, "fov_l": series.fov_l, "cell_size": series.cell_size}
    if coords is not None:
        coords.astype("<f4").tofile(path.with_suffix(".coords.bin"))
        meta["coords"] = path.with_suffix(".coords.bin").name
    path.with_suffix(".json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")


def read_micromaps(path) -> tuple:
    """Returns (crops, coords or None, meta)."""
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    shape = (meta["T"], meta["C"], meta["S"], meta["S"])
    crops = np.fromfile(path, dtype="<f4").reshape(shape)
    coords = None
    if "coords" in meta:
        coords = np.fromfile(path.parent / meta["coords"], dtype="<f4").reshape(shape)
    return crops, coords, meta
