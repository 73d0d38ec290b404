"""Building polygons, LOS crossings and first-Fresnel-zone geometry."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .mapio import MultiAttributeMap

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0
SNAP_TOL = 1e-6  # meters
DEFAULT_HEIGHT_QUANTUM = 3.0


class GeometryError(ValueError):
    pass


def wavelength(f_c: float) -> float:
    return SPEED_OF_LIGHT / f_c


def polygon_area(vertices: np.ndarray) -> float:
    """Signed shoelace area (positive for counter-clockwise)."""
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; counter-clockwise, no collinear vertices."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) < 3:
        return pts

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def decimate(vertices: np.ndarray, max_vertices: int) -> np.ndarray:
    """Drop the vertex whose removal changes the area least until few enough remain.

    Ties go to the lowest vertex index.
    """
    v = np.asarray(vertices, dtype=np.float64)
    while len(v) > max_vertices:
        prev = np.roll(v, 1, axis=0)
        nxt = np.roll(v, -1, axis=0)
        tri = 0.5 * np.abs((v[:, 0] - prev[:, 0]) * (nxt[:, 1] - prev[:, 1])
                           - (nxt[:, 0] - prev[:, 0]) * (v[:, 1] - prev[:, 1]))
        v = np.delete(v, int(np.argmin(tri)), axis=0)
    return v


def points_in_polygon(points: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Even-odd ray casting; boundary points may go either way."""
    px = points[:, 0][:, None]
    py = points[:, 1][:, None]
    x0, y0 = vertices[:, 0], vertices[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    straddle = (y0 > py) != (y1 > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
    hits = straddle & (px < xcross)
    return (np.count_nonzero(hits, axis=1) % 2) == 1


def _segment_edge_params(p0: np.ndarray, p1: np.ndarray, vertices: np.ndarray) -> np.ndarray:
    """Parameters t in [0, 1] where segment p0->p1 meets polygon edges."""
    d = p1 - p0
    a = vertices
    e = np.roll(vertices, -1, axis=0) - a
    denom = d[0] * e[:, 1] - d[1] * e[:, 0]
    w = a - p0
    ok = np.abs(denom) > 1e-15
    t = np.full(len(a), np.nan)
    s = np.full(len(a), np.nan)
    t[ok] = (w[ok, 0] * e[ok, 1] - w[ok, 1] * e[ok, 0]) / denom[ok]
    s[ok] = (w[ok, 0] * d[1] - w[ok, 1] * d[0]) / denom[ok]
    eps = 1e-12
    hit = ok & (t >= -eps) & (t <= 1 + eps) & (s >= -eps) & (s <= 1 + eps)
    return np.clip(t[hit], 0.0, 1.0)


def segment_inside_intervals(p0, p1, vertices: np.ndarray, min_length: float = SNAP_TOL) -> list:
    """Sub-intervals [ta, tb] of the horizontal segment lying inside the polygon."""
    p0 = np.asarray(p0, dtype=np.float64)[:2]
    p1 = np.asarray(p1, dtype=np.float64)[:2]
    length = float(np.hypot(*(p1 - p0)))
    if length == 0.0:
        return []
    ts = np.unique(np.concatenate([[0.0, 1.0], _segment_edge_params(p0, p1, vertices)]))
    if len(ts) < 2:
        return []
    mids = 0.5 * (ts[:-1] + ts[1:])
    inside = points_in_polygon(p0 + mids[:, None] * (p1 - p0), vertices)
    out: list = []
    for ta, tb, ins in zip(ts[:-1], ts[1:], inside):
        if not ins:
            continue
        if out and abs(out[-1][1] - ta) < 1e-15:
            out[-1][1] = tb
        else:
            out.append([ta, tb])
    return [(a, b) for a, b in out if (b - a) * length > min_length]


@dataclass(frozen=True)
class Building:
    id: int
    footprint: np.ndarray
    roof_height: float
    ground: float = 0.0

    def __post_init__(self):
        fp = np.array(self.footprint, dtype=np.float64).reshape(-1, 2)
        if polygon_area(fp) < 0:
            fp = fp[::-1].copy()
        fp.setflags(write=False)
        object.__setattr__(self, "footprint", fp)

    @property
    def area(self) -> float:
        return polygon_area(self.footprint)

    @property
    def bbox(self) -> tuple:
        return (*self.footprint.min(axis=0), *self.footprint.max(axis=0))


@dataclass(frozen=True)
class Facade:
    """Vertical rectangle over a footprint edge, from ground to roof."""

    building_id: int
    a: np.ndarray
    b: np.ndarray
    z0: float
    z1: float

    @property
    def normal(self) -> np.ndarray:
        """Outward unit normal (footprints are counter-clockwise)."""
        d = self.b - self.a
        n = np.array([d[1], -d[0], 0.0])
        return n / np.linalg.norm(n)

    @property
    def width(self) -> float:
        return float(np.linalg.norm(self.b - self.a))


def _is_simple(vertices: np.ndarray) -> bool:
    n = len(vertices)
    for i in range(n):
        a, b = vertices[i], vertices[(i + 1) % n]
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            c, d = vertices[j], vertices[(j + 1) % n]
            if _segments_cross(a, b, c, d):
                return False
    return True


def _segments_cross(a, b, c, d) -> bool:
    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    o1, o2, o3, o4 = orient(a, b, c), orient(a, b, d), orient(c, d, a), orient(c, d, b)
    return (o1 * o2 < 0) and (o3 * o4 < 0)


class PolygonScene:
    """Immutable set of extruded building footprints."""

    def __init__(self, buildings: Iterable[Building], ground_altitude_fn: Optional[Callable] = None,
                 validate: bool = True, dropped: int = 0):
        self.buildings: tuple = tuple(buildings)
        self.ground_altitude_fn = ground_altitude_fn
        self.dropped = dropped
        if validate:
            for b in self.buildings:
                nv = len(b.footprint)
                if not 3 <= nv <= 6:
                    raise GeometryError(f"building {b.id}: footprint has {nv} vertices (needs 3..6)")
                if not b.area > 0:
                    raise GeometryError(f"building {b.id}: footprint has no area")
                if not _is_simple(b.footprint):
                    raise GeometryError(f"building {b.id}: footprint self-intersects")
                if b.roof_height < b.ground - 1e-9:
                    raise GeometryError(f"building {b.id}: roof below ground")
        if self.buildings:
            self._bboxes = np.array([b.bbox for b in self.buildings])
        else:
            self._bboxes = np.zeros((0, 4))
        self._facades: Optional[list] = None

    def __len__(self):
        return len(self.buildings)

    def ground_at(self, x, y):
        if self.ground_altitude_fn is None:
            return np.zeros_like(np.asarray(x, dtype=np.float64))
        return self.ground_altitude_fn(x, y)

    def facades(self) -> list:
        if self._facades is None:
            fac = []
            for b in self.buildings:
                v = b.footprint
                for i in range(len(v)):
                    fac.append(Facade(b.id, v[i].copy(), v[(i + 1) % len(v)].copy(), b.ground, b.roof_height))
            self._facades = fac
        return self._facades

    def candidates(self, p0, p1) -> np.ndarray:
        """Indices of buildings whose bbox overlaps the segment bbox."""
        if not len(self.buildings):
            return np.zeros(0, dtype=int)
        lo = np.minimum(p0[:2], p1[:2])
        hi = np.maximum(p0[:2], p1[:2])
        bb = self._bboxes
        mask = (bb[:, 0] <= hi[0]) & (bb[:, 2] >= lo[0]) & (bb[:, 1] <= hi[1]) & (bb[:, 3] >= lo[1])
        return np.flatnonzero(mask)

    def crossed(self, p0, p1) -> list:
        """(building index, inside intervals) for footprints the horizontal segment enters."""
        p0 = np.asarray(p0, dtype=np.float64)
        p1 = np.asarray(p1, dtype=np.float64)
        out = []
        for i in self.candidates(p0, p1):
            iv = segment_inside_intervals(p0, p1, self.buildings[i].footprint)
            if iv:
                out.append((int(i), iv))
        return out

    def count_crossed(self, p0, p1) -> int:
        return len(self.crossed(p0, p1))

    def segment_blocked(self, p0, p1, tol: float = 1e-6) -> bool:
        """True when the 3-D segment passes through any building volume."""
        p0 = np.asarray(p0, dtype=np.float64)
        p1 = np.asarray(p1, dtype=np.float64)
        for i, ivs in self.crossed(p0, p1):
            roof = self.buildings[i].roof_height
            for ta, tb in ivs:
                za = p0[2] + (p1[2] - p0[2]) * ta
                zb = p0[2] + (p1[2] - p0[2]) * tb
                if min(za, zb) < roof - tol:
                    return True
        return False

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for b in self.buildings:
                fh.write(json.dumps({
                    "id": int(b.id),
                    "roof_height": float(b.roof_height),
                    "vertices": [[float(x), float(y)] for x, y in b.footprint],
                }) + "\n")

    @classmethod
    def from_jsonl(cls, path, ground_altitude_fn: Optional[Callable] = None) -> "PolygonScene":
        buildings = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                rec = json.loads(line)
                fp = np.array(rec["vertices"], dtype=np.float64)
                ground = _footprint_ground(fp, ground_altitude_fn)
                buildings.append(Building(int(rec["id"]), fp, float(rec["roof_height"]), ground))
        return cls(buildings, ground_altitude_fn)


def _footprint_ground(footprint: np.ndarray, fn: Optional[Callable]) -> float:
    if fn is None:
        return 0.0
    vals = np.asarray(fn(footprint[:, 0], footprint[:, 1]), dtype=np.float64)
    vals = vals[np.isfinite(vals)]
    return float(vals.mean()) if len(vals) else 0.0


def polygonize(map_: MultiAttributeMap, max_edges: int = 6,
               height_quantum: float = DEFAULT_HEIGHT_QUANTUM) -> PolygonScene:
    """Turn building-height regions into convex footprints with at most ``max_edges`` vertices.

    Cells are grouped by 4-connectivity within the same height bucket
    (``floor(h / height_quantum)``); each group's footprint is the convex hull
    of its cell corners, decimated down to ``max_edges`` vertices. Roof height
    is the group's mean absolute rooftop altitude.
    """
    if not 3 <= max_edges <= 6:
        raise ValueError(f"max_edges must be in 3..6, got {max_edges}")
    if not height_quantum > 0:
        raise ValueError("height_quantum must be positive")
    bh = np.where(map_.nodata, 0.0, map_.building_height)
    occupied = bh > 0
    bucket = np.where(occupied, np.floor(bh / height_quantum).astype(np.int64) + 1, 0)

    regions = []
    for bval in np.unique(bucket[occupied]):
        labels, n = ndimage.label(bucket == bval)
        for lab in range(1, n + 1):
            cells = np.argwhere(labels == lab)
            regions.append(cells)
    regions.sort(key=lambda cells: (int(cells[0, 0]) * map_.width + int(cells[0, 1])))

    cs = map_.cell_size
    x0, y0 = map_.origin
    buildings = []
    dropped = 0
    for cells in regions:
        r = cells[:, 0]
        c = cells[:, 1]
        left = x0 + c * cs
        top = y0 + (map_.height - r) * cs
        corners = np.concatenate([
            np.column_stack([left, top]),
            np.column_stack([left + cs, top]),
            np.column_stack([left, top - cs]),
            np.column_stack([left + cs, top - cs]),
        ])
        hull = convex_hull(corners)
        if len(hull) < 3 or polygon_area(hull) <= 0:
            dropped += 1
            continue
        fp = decimate(hull, max_edges)
        if polygon_area(fp) <= 0:
            dropped += 1
            continue
        roof = float(np.mean(map_.altitude[r, c] + bh[r, c]))
        ground = _footprint_ground(fp, map_.sample_altitude)
        buildings.append(Building(len(buildings), fp, roof, min(ground, roof)))
    if dropped:
        log.warning("polygonize dropped %d degenerate regions", dropped)
    return PolygonScene(buildings, map_.sample_altitude, dropped=dropped)


@dataclass(frozen=True)
class FresnelGeometry:
    building_id: int
    point: tuple
    d_bs: float
    d_ue: float
    h_ray: float
    h_roof: float
    delta_h: float
    r_f1: float
    v: float


def fresnel_radius(wavelength_m: float, d_bs: float, d_ue: float) -> float:
    total = d_bs + d_ue
    if total <= 0:
        return 0.0
    return math.sqrt(wavelength_m * d_bs * d_ue / total)


def diffraction_parameter(delta_h: float, r_f1: float) -> float:
    if r_f1 > 0:
        return math.sqrt(2.0) * delta_h / r_f1
    if delta_h == 0:
        return 0.0
    return math.copysign(math.inf, delta_h)


def ray_height_at(bs_pos3d, ue_pos3d, point2d, tol: float = SNAP_TOL) -> float:
    """Height of the straight BS-UE ray above the given horizontal point."""
    bs = np.asarray(bs_pos3d, dtype=np.float64)
    ue = np.asarray(ue_pos3d, dtype=np.float64)
    p = np.asarray(point2d, dtype=np.float64)[:2]
    seg = ue[:2] - bs[:2]
    length = float(np.hypot(*seg))
    if length == 0:
        if np.hypot(*(p - bs[:2])) > tol:
            raise GeometryError("point is off the (degenerate) BS-UE segment")
        return float(bs[2])
    d_bs = float(np.hypot(*(p - bs[:2])))
    d_ue = float(np.hypot(*(p - ue[:2])))
    if d_bs + d_ue - length > tol:
        raise GeometryError(f"point {tuple(p)} lies {d_bs + d_ue - length:.3g} m off the BS-UE segment")
    frac = d_bs / (d_bs + d_ue)
    return float(bs[2] + (ue[2] - bs[2]) * frac)


def los_blockers(scene: PolygonScene, bs_pos3d, ue_pos3d, f_c: float) -> List[FresnelGeometry]:
    """Fresnel geometry for every footprint the BS-UE ground track crosses.

    Each building is evaluated at its crossing nearest the UE; the list is
    ordered by distance to the UE.
    """
    bs = np.asarray(bs_pos3d, dtype=np.float64)
    ue = np.asarray(ue_pos3d, dtype=np.float64)
    length = float(np.hypot(*(ue[:2] - bs[:2])))
    if length <= SNAP_TOL:
        return []
    lam = wavelength(f_c)
    out = []
    for i, ivs in scene.crossed(bs, ue):
        t = ivs[-1][1]
        b = scene.buildings[i]
        d_bs = t * length
        d_ue = (1.0 - t) * length
        h_ray = float(bs[2] + (ue[2] - bs[2]) * t)
        dh = b.roof_height - h_ray
        r = fresnel_radius(lam, d_bs, d_ue)
        pt = bs[:2] + t * (ue[:2] - bs[:2])
        out.append(FresnelGeometry(b.id, (float(pt[0]), float(pt[1])), d_bs, d_ue, h_ray,
                                   b.roof_height, dh, r, diffraction_parameter(dh, r)))
    out.sort(key=lambda g: (g.d_ue, g.building_id))
    return out
