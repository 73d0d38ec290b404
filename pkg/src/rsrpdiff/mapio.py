"""On-disk formats and validated input types.

Grids use an ESRI-ASCII-style text layout::

    ncols 3
    nrows 2
    xllcorner 0.0
    yllcorner 0.0
    cellsize 5.0
    nodata_value -9999.0
    1.0 2.0 3.0
    4.0 5.0 6.0

Rows are stored north to south, so ``values[0]`` is the northmost row while
map coordinates use x east / y north with the origin at the lower-left corner.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "RasterParseError",
    "GridMismatchError",
    "MapValidationError",
    "TrajectoryError",
    "Raster",
    "MultiAttributeMap",
    "Trajectory",
    "BaseStation",
    "NetworkParamsSeries",
    "RSRPSeries",
    "NETWORK_PARAM_NAMES",
    "load_raster",
    "parse_raster",
    "write_raster",
    "format_raster",
    "load_scene",
    "load_trajectory",
    "write_trajectory",
    "load_bs_record",
    "write_bs_record",
    "load_manifest",
    "write_manifest",
    "derive_network_params",
]

NETWORK_PARAM_NAMES = ("P_t", "f_c", "h_t", "h_r", "L", "D", "alpha", "beta", "gamma", "N_b")

_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize", "nodata_value")


class RasterParseError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GridMismatchError(ValueError):
    pass


class MapValidationError(ValueError):
    pass


class TrajectoryError(ValueError):
    pass


@dataclass(frozen=True)
class Raster:
    values: np.ndarray
    cellsize: float
    xllcorner: float = 0.0
    yllcorner: float = 0.0
    nodata_value: Optional[float] = None

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("raster values must be 2-D")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)
        if not self.cellsize > 0:
            raise ValueError(f"cellsize must be positive, got {self.cellsize}")

    @property
    def nrows(self) -> int:
        return self.values.shape[0]

    @property
    def ncols(self) -> int:
        return self.values.shape[1]

    @property
    def nodata_mask(self) -> np.ndarray:
        if self.nodata_value is None:
            return np.zeros(self.values.shape, dtype=bool)
        return self.values == self.nodata_value

    def header(self) -> dict:
        return {
            "ncols": self.ncols,
            "nrows": self.nrows,
            "xllcorner": self.xllcorner,
            "yllcorner": self.yllcorner,
            "cellsize": self.cellsize,
            "nodata_value": self.nodata_value,
        }

    def __getitem__(self, idx):
        return self.values[idx]


def parse_raster(text: str) -> Raster:
    """Parse grid text. Errors carry the 1-based line number."""
    lines = text.splitlines()
    header: dict[str, float] = {}
    lineno = 0
    while lineno < len(lines):
        raw = lines[lineno].strip()
        if not raw:
            lineno += 1
            continue
        parts = raw.split()
        key = parts[0].lower()
        if key[0].isdigit() or key[0] in "+-.":
            break
        if key not in _HEADER_KEYS:
            raise RasterParseError(f"unknown header key {parts[0]!r}", lineno + 1)
        if len(parts) != 2:
            raise RasterParseError(f"header {key} expects one value", lineno + 1)
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise RasterParseError(f"non-numeric header value {parts[1]!r}", lineno + 1) from None
        lineno += 1

    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise RasterParseError(f"missing header key {key}", lineno + 1)
    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows) or ncols < 1 or nrows < 1:
        raise RasterParseError("ncols/nrows must be positive integers")
    ncols, nrows = int(ncols), int(nrows)
    if header["cellsize"] <= 0:
        raise RasterParseError("cellsize must be positive")

    rows = []
    for i in range(lineno, len(lines)):
        raw = lines[i].strip()
        if not raw:
            continue
        tokens = raw.split()
        if len(tokens) != ncols:
            raise RasterParseError(f"expected {ncols} values, found {len(tokens)}", i + 1)
        try:
            rows.append([float(tok) for tok in tokens])
        except ValueError as exc:
            raise RasterParseError(f"non-numeric cell ({exc})", i + 1) from None
    if len(rows) != nrows:
        raise RasterParseError(f"expected {nrows} rows, found {len(rows)}", len(lines))

    return Raster(
        values=np.array(rows, dtype=np.float64),
        cellsize=header["cellsize"],
        xllcorner=header.get("xllcorner", 0.0),
        yllcorner=header.get("yllcorner", 0.0),
        nodata_value=header.get("nodata_value"),
    )


def load_raster(path) -> Raster:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_raster(fh.read())


def format_raster(raster: Raster) -> str:
    """Canonical text form; ``parse_raster(format_raster(r))`` reproduces ``r`` exactly."""
    out = [
        f"ncols {raster.ncols}",
        f"nrows {raster.nrows}",
        f"xllcorner {float(raster.xllcorner)!r}",
        f"yllcorner {float(raster.yllcorner)!r}",
        f"cellsize {float(raster.cellsize)!r}",
    ]
    if raster.nodata_value is not None:
        out.append(f"nodata_value {float(raster.nodata_value)!r}")
    for row in raster.values:
        out.append(" ".join(repr(float(v)) for v in row))
    return "\n".join(out) + "\n"


def write_raster(raster: Raster, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_raster(raster))


@dataclass(frozen=True)
class MultiAttributeMap:
    """Paired ground-altitude and building-height rasters on one grid."""

    altitude: np.ndarray
    building_height: np.ndarray
    cell_size: float
    origin: tuple = (0.0, 0.0)
    nodata: Optional[np.ndarray] = None

    def __post_init__(self):
        alt = np.array(self.altitude, dtype=np.float64)
        bh = np.array(self.building_height, dtype=np.float64)
        if alt.shape != bh.shape or alt.ndim != 2:
            raise GridMismatchError(f"raster shapes differ: {alt.shape} vs {bh.shape}")
        if not self.cell_size > 0:
            raise MapValidationError("cell_size must be positive")
        nod = np.zeros(alt.shape, dtype=bool) if self.nodata is None else np.array(self.nodata, dtype=bool)
        if nod.shape != alt.shape:
            raise GridMismatchError("nodata mask shape differs from rasters")
        bad = (bh < 0) & ~nod
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise MapValidationError(f"negative building height {bh[r, c]} at row {r}, col {c}")
        for a in (alt, bh, nod):
            a.setflags(write=False)
        object.__setattr__(self, "altitude", alt)
        object.__setattr__(self, "building_height", bh)
        object.__setattr__(self, "nodata", nod)
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "cell_size", float(self.cell_size))

    @property
    def height(self) -> int:
        return self.altitude.shape[0]

    @property
    def width(self) -> int:
        return self.altitude.shape[1]

    @property
    def extent(self) -> tuple:
        """(xmin, ymin, xmax, ymax) in meters."""
        x0, y0 = self.origin
        return (x0, y0, x0 + self.width * self.cell_size, y0 + self.height * self.cell_size)

    def contains(self, x, y) -> np.ndarray:
        xmin, ymin, xmax, ymax = self.extent
        x = np.asarray(x)
        y = np.asarray(y)
        return (x >= xmin) & (x <= xmax) & (y >= ymin) & (y <= ymax)

    def world_to_cell(self, x, y):
        """Continuous (row, col) with integer values at cell centers."""
        x0, y0 = self.origin
        col = (np.asarray(x, dtype=np.float64) - x0) / self.cell_size - 0.5
        row = self.height - (np.asarray(y, dtype=np.float64) - y0) / self.cell_size - 0.5
        return row, col

    def cell_center(self, row, col):
        x0, y0 = self.origin
        x = x0 + (np.asarray(col, dtype=np.float64) + 0.5) * self.cell_size
        y = y0 + (self.height - np.asarray(row, dtype=np.float64) - 0.5) * self.cell_size
        return x, y

    def cell_index(self, x, y):
        """Integer (row, col) of the cell containing each point, clamped to the grid."""
        row, col = self.world_to_cell(x, y)
        r = np.clip(np.floor(row + 0.5).astype(int), 0, self.height - 1)
        c = np.clip(np.floor(col + 0.5).astype(int), 0, self.width - 1)
        return r, c

    def sample_altitude(self, x, y) -> np.ndarray:
        """Bilinear altitude at arbitrary points; NaN where any neighbour is nodata."""
        row, col = self.world_to_cell(x, y)
        row = np.clip(np.atleast_1d(row), 0.0, self.height - 1.0)
        col = np.clip(np.atleast_1d(col), 0.0, self.width - 1.0)
        r0 = np.minimum(np.floor(row).astype(int), self.height - 1)
        c0 = np.minimum(np.floor(col).astype(int), self.width - 1)
        r1 = np.minimum(r0 + 1, self.height - 1)
        c1 = np.minimum(c0 + 1, self.width - 1)
        fr = row - r0
        fc = col - c0
        a = self.altitude
        val = (
            a[r0, c0] * (1 - fr) * (1 - fc)
            + a[r0, c1] * (1 - fr) * fc
            + a[r1, c0] * fr * (1 - fc)
            + a[r1, c1] * fr * fc
        )
        bad = self.nodata[r0, c0] | self.nodata[r0, c1] | self.nodata[r1, c0] | self.nodata[r1, c1]
        return np.where(bad, np.nan, val)

    def shifted(self, dx: float, dy: float) -> "MultiAttributeMap":
        return MultiAttributeMap(
            self.altitude, self.building_height, self.cell_size,
            (self.origin[0] + dx, self.origin[1] + dy), self.nodata,
        )

    def to_rasters(self) -> tuple:
        x0, y0 = self.origin
        alt = Raster(self.altitude, self.cell_size, x0, y0)
        bh = Raster(self.building_height, self.cell_size, x0, y0)
        return alt, bh


def load_scene(alt_path, bhgt_path) -> MultiAttributeMap:
    alt = load_raster(alt_path)
    bh = load_raster(bhgt_path)
    ha, hb = alt.header(), bh.header()
    for key in ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize"):
        if ha[key] != hb[key]:
            raise GridMismatchError(f"incompatible grids ({key}): altitude {ha} vs building height {hb}")
    nodata = alt.nodata_mask | bh.nodata_mask
    return MultiAttributeMap(
        altitude=alt.values,
        building_height=np.where(bh.nodata_mask, 0.0, bh.values),
        cell_size=alt.cellsize,
        origin=(alt.xllcorner, alt.yllcorner),
        nodata=nodata,
    )


@dataclass(frozen=True)
class Trajectory:
    points: np.ndarray
    ue_height: float = 1.5

    def __post_init__(self):
        pts = np.array(self.points, dtype=np.float64).reshape(-1, 2)
        if len(pts) < 2:
            raise TrajectoryError(f"trajectory needs at least 2 points, got {len(pts)}")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)

    @property
    def T(self) -> int:
        return len(self.points)

    @property
    def timestep_index(self) -> np.ndarray:
        return np.arange(self.T)

    def check_bounds(self, map_: MultiAttributeMap) -> None:
        inside = map_.contains(self.points[:, 0], self.points[:, 1])
        if not inside.all():
            idx = int(np.flatnonzero(~inside)[0])
            raise TrajectoryError(f"point {idx} {tuple(self.points[idx])} lies outside map extent {map_.extent}")

    def shifted(self, dx: float, dy: float) -> "Trajectory":
        return Trajectory(self.points + np.array([dx, dy]), self.ue_height)


def load_trajectory(path, map_: Optional[MultiAttributeMap] = None, ue_height: float = 1.5) -> Trajectory:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["t", "x", "y"]:
            raise TrajectoryError(f"trajectory header must be t,x,y (got {reader.fieldnames})")
        pts = []
        for i, row in enumerate(reader):
            t = int(row["t"])
            if t != i:
                raise TrajectoryError(f"row {i}: t must increase by one from 0, got {t}")
            pts.append((float(row["x"]), float(row["y"])))
    traj = Trajectory(np.array(pts).reshape(-1, 2), ue_height)
    if map_ is not None:
        traj.check_bounds(map_)
    return traj


def write_trajectory(traj: Trajectory, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "x", "y"])
        for t, (x, y) in enumerate(traj.points):
            w.writerow([t, repr(float(x)), repr(float(y))])


@dataclass(frozen=True)
class BaseStation:
    x: float
    y: float
    H_BS: float
    AL_BS: float = 0.0
    P_t_dBm: float = 43.0
    f_c_Hz: float = 3.5e9
    downtilt_rad: float = 0.1
    azimuth_rad: float = 0.0

    @property
    def h_t(self) -> float:
        return self.H_BS + self.AL_BS

    @property
    def position3d(self) -> np.ndarray:
        return np.array([self.x, self.y, self.h_t])

    def boresight(self) -> np.ndarray:
        ct = math.cos(self.downtilt_rad)
        return np.array([
            ct * math.cos(self.azimuth_rad),
            ct * math.sin(self.azimuth_rad),
            -math.sin(self.downtilt_rad),
        ])

    def to_json(self) -> dict:
        return {k: float(getattr(self, k)) for k in
                ("x", "y", "H_BS", "AL_BS", "P_t_dBm", "f_c_Hz", "downtilt_rad", "azimuth_rad")}

    def shifted(self, dx: float, dy: float) -> "BaseStation":
        d = self.to_json()
        d["x"] += dx
        d["y"] += dy
        return BaseStation(**d)


def load_bs_record(path) -> BaseStation:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    missing = {"x", "y", "H_BS"} - set(data)
    if missing:
        raise ValueError(f"BS record missing keys: {sorted(missing)}")
    return BaseStation(**{k: float(v) for k, v in data.items()})


def write_bs_record(bs: BaseStation, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(bs.to_json(), fh, indent=1, sort_keys=True)


def load_manifest(path) -> list:
    """Dataset manifest: list of {trajectory, bs, target_rsrp?} with paths resolved."""
    path = Path(path)
    root = path.parent
    with open(path, encoding="utf-8") as fh:
        entries = json.load(fh)
    if isinstance(entries, dict):
        entries = entries["samples"]
    out = []
    for i, e in enumerate(entries):
        if "trajectory" not in e or "bs" not in e:
            raise ValueError(f"manifest entry {i} needs 'trajectory' and 'bs'")
        item = dict(e)
        for key in ("trajectory", "bs", "target_rsrp", "features"):
            if item.get(key) is not None:
                item[key] = str(root / item[key])
        out.append(item)
    return out


def write_manifest(entries: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(list(entries), fh, indent=1)


@dataclass(frozen=True)
class NetworkParamsSeries:
    """Per-timestep (T, 10) condition matrix in ``NETWORK_PARAM_NAMES`` order."""

    values: np.ndarray
    bs: Optional[BaseStation] = None

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[1] != len(NETWORK_PARAM_NAMES):
            raise ValueError(f"network params must be (T, 10), got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __getattr__(self, name):
        if name in NETWORK_PARAM_NAMES:
            return self.values[:, NETWORK_PARAM_NAMES.index(name)]
        raise AttributeError(name)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    def validate(self, rtol: float = 1e-6) -> None:
        L, D = self.L, self.D
        if np.any(L < 0) or np.any(D < L * (1 - 1e-12)):
            raise ValueError("distances violate D >= L >= 0")
        expect = np.sqrt(L ** 2 + (self.h_t - self.h_r) ** 2)
        if not np.allclose(D, expect, rtol=rtol, atol=0):
            raise ValueError("D is inconsistent with L and antenna heights")
        if np.any(self.f_c <= 0):
            raise ValueError("carrier frequency must be positive")
        nb = self.N_b
        if np.any(nb < 0) or np.any(nb != np.round(nb)):
            raise ValueError("N_b must be a non-negative integer")


@dataclass(frozen=True)
class RSRPSeries:
    values: np.ndarray
    flags: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(v)):
            raise ValueError("RSRP values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return len(self.values)


def _angle_between(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    nu = np.linalg.norm(u, axis=-1)
    nv = np.linalg.norm(v, axis=-1)
    denom = nu * nv
    cos = np.divide(np.sum(u * v, axis=-1), denom, out=np.ones_like(denom), where=denom > 0)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def derive_network_params(map_: MultiAttributeMap, bs: BaseStation, trajectory: Trajectory,
                          scene=None) -> NetworkParamsSeries:
    """Per-timestep link geometry for a BS and a trajectory.

    ``alpha`` is the 3-D angle between boresight and the BS->UE vector, ``gamma``
    the angle between their horizontal projections and ``beta`` the absolute
    difference of their elevation angles. ``N_b`` counts building footprints
    crossed by the horizontal BS-UE segment; the scene is polygonized from the
    map when not given.
    """
    from . import geometry

    pts = trajectory.points
    ground = map_.sample_altitude(pts[:, 0], pts[:, 1])
    if np.any(np.isnan(ground)):
        idx = int(np.flatnonzero(np.isnan(ground))[0])
        raise MapValidationError(f"trajectory point {idx} lies over a nodata altitude cell")
    if scene is None:
        scene = geometry.polygonize(map_)

    T = len(pts)
    h_t = bs.h_t
    h_r = ground + trajectory.ue_height
    delta = pts - np.array([bs.x, bs.y])
    L = np.hypot(delta[:, 0], delta[:, 1])
    D = np.sqrt(L ** 2 + (h_t - h_r) ** 2)

    los = np.column_stack([delta, h_r - h_t])
    bore = bs.boresight()
    alpha = _angle_between(los, np.broadcast_to(bore, los.shape))
    bore_h = np.broadcast_to(bore[:2], delta.shape)
    gamma = np.where(L > 0, _angle_between(delta, bore_h), 0.0)
    elev_los = np.arctan2(h_r - h_t, L)
    beta = np.abs(elev_los - (-bs.downtilt_rad))

    bs_xy = np.array([bs.x, bs.y])
    n_b = np.array([scene.count_crossed(bs_xy, p) for p in pts], dtype=np.float64)

    values = np.column_stack([
        np.full(T, bs.P_t_dBm), np.full(T, bs.f_c_Hz), np.full(T, h_t), h_r,
        L, D, alpha, beta, gamma, n_b,
    ])
    return NetworkParamsSeries(values, bs)
