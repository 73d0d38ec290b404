"""Specular multipath by the image method, path features and a coherent-sum channel.

Reflecting surfaces are building facades (vertical rectangles over footprint
edges, ground to roof) and a horizontal ground plane at the mean terrain
altitude under the BS-UE segment. Every leg of a returned path is checked
against all building volumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .geometry import SPEED_OF_LIGHT, PolygonScene
from .mapio import NetworkParamsSeries, RSRPSeries
from .propagation import PropagationConfig

GROUND = "GROUND"

# flop costs per primitive, used for the e_RE cost proxy
FLOPS_MIRROR = 9
FLOPS_INTERSECT = 30
FLOPS_OCCLUSION_PER_FACADE = 30
FLOPS_LOS = 9

NO_PATH_FLOOR_DBM = -140.0
_EPS = 1e-9


@dataclass(frozen=True, eq=False)
class ReflectedPath:
    waypoints: np.ndarray
    surfaces: tuple = ()
    normals: tuple = field(default=(), compare=False)

    @property
    def order(self) -> int:
        return len(self.waypoints) - 2

    @property
    def legs(self) -> np.ndarray:
        return np.diff(self.waypoints, axis=0)

    @property
    def d_ref(self) -> float:
        return float(np.sum(np.linalg.norm(self.legs, axis=1)))

    @property
    def cos_aod(self) -> np.ndarray:
        """Vertical direction cosine of each leg (departure from p_i towards p_{i+1})."""
        legs = self.legs
        return legs[:, 2] / np.linalg.norm(legs, axis=1)

    @property
    def cos_inc(self) -> np.ndarray:
        """Cosine between the incident ray and the surface normal at each bounce."""
        legs = self.legs
        out = np.empty(self.order)
        for i in range(self.order):
            n = self.normals[i]
            d = legs[i] / np.linalg.norm(legs[i])
            out[i] = abs(float(np.dot(d, n)))
        return out

    def features(self, n_ref: int) -> np.ndarray:
        """[log10 d_ref, n, cos AoD_0, cos inc_1, cos AoD_1, ...] zero-padded to 2*n_ref+3."""
        n = self.order
        if n > n_ref:
            raise ValueError(f"path of order {n} exceeds N_ref={n_ref}")
        row = np.zeros(2 * n_ref + 3)
        row[0] = math.log10(self.d_ref)
        row[1] = n
        aod = self.cos_aod
        inc = self.cos_inc
        row[2] = aod[0]
        for i in range(1, n + 1):
            row[1 + 2 * i] = inc[i - 1]
            row[2 + 2 * i] = aod[i]
        return row

    def reversed(self) -> "ReflectedPath":
        return ReflectedPath(self.waypoints[::-1].copy(), tuple(reversed(self.surfaces)),
                             tuple(reversed(self.normals)))


@dataclass(frozen=True)
class SyntheticChannelConfig:
    eta: float = 1.0
    rho: float = 0.3
    noise_sigma_db: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not 0 < self.rho < 1:
            raise ValueError("rho must be in (0, 1)")
        if self.noise_sigma_db < 0:
            raise ValueError("noise_sigma_db must be non-negative")


@dataclass
class FlopCounter:
    mirrors: int = 0
    intersections: int = 0
    occlusion_facades: int = 0
    los: int = 0

    @property
    def flops(self) -> int:
        return (FLOPS_MIRROR * self.mirrors + FLOPS_INTERSECT * self.intersections
                + FLOPS_OCCLUSION_PER_FACADE * self.occlusion_facades + FLOPS_LOS * self.los)


class _Planes:
    """Stacked facade planes (plus optional ground) for vectorized image tests."""

    def __init__(self, facades: Sequence, ground_z: Optional[float], cached: Optional[dict] = None):
        fa = cached if cached is not None else facade_arrays(facades)
        F = len(fa["anchor"])
        self.n_facades = F
        g = ground_z is not None
        self.anchor = fa["anchor"]
        self.normal = fa["normal"]
        self.edge = fa["edge"]
        self.width = fa["width"]
        self.z0 = fa["z0"]
        self.z1 = fa["z1"]
        self.bounded = fa["bounded"]
        self.labels = list(range(F))
        if g:
            self.anchor = np.vstack([self.anchor, [0.0, 0.0, ground_z]])
            self.normal = np.vstack([self.normal, [0.0, 0.0, 1.0]])
            self.edge = np.vstack([self.edge, [1.0, 0.0, 0.0]])
            self.width = np.append(self.width, np.inf)
            self.z0 = np.append(self.z0, -np.inf)
            self.z1 = np.append(self.z1, np.inf)
            self.bounded = np.append(self.bounded, False)
            self.labels.append(GROUND)

    def __len__(self):
        return len(self.anchor)

    def side(self, p: np.ndarray, idx=slice(None)) -> np.ndarray:
        return np.einsum("...k,...k->...", p - self.anchor[idx], self.normal[idx])

    def mirror(self, p: np.ndarray, idx=slice(None)) -> np.ndarray:
        return p - 2.0 * self.side(p, idx)[..., None] * self.normal[idx]

    def hit(self, src: np.ndarray, dst: np.ndarray, idx=slice(None)):
        """Intersection of segments src->dst with planes idx; returns (points, valid)."""
        n = self.normal[idx]
        denom = np.einsum("...k,...k->...", dst - src, n)
        num = np.einsum("...k,...k->...", self.anchor[idx] - src, n)
        with np.errstate(divide="ignore", invalid="ignore"):
            s = num / denom
        ok = (np.abs(denom) > 1e-12) & (s > _EPS) & (s < 1 - _EPS)
        s = np.where(ok, s, 0.0)
        pts = src + s[..., None] * (dst - src)
        u = np.einsum("...k,...k->...", pts - self.anchor[idx], self.edge[idx])
        inside = ~self.bounded[idx] | (
            (u >= -_EPS) & (u <= self.width[idx] + _EPS)
            & (pts[..., 2] >= self.z0[idx] - _EPS) & (pts[..., 2] <= self.z1[idx] + _EPS)
        )
        return pts, ok & inside


def facade_arrays(facades: Sequence) -> dict:
    F = len(facades)
    out = {"anchor": np.zeros((F, 3)), "normal": np.zeros((F, 3)), "edge": np.zeros((F, 3)),
           "width": np.zeros(F), "z0": np.zeros(F), "z1": np.zeros(F), "bounded": np.ones(F, dtype=bool)}
    for i, f in enumerate(facades):
        out["anchor"][i, :2] = f.a
        out["normal"][i] = f.normal
        w = f.width
        out["edge"][i, :2] = (f.b - f.a) / w
        out["width"][i] = w
        out["z0"][i] = f.z0
        out["z1"][i] = f.z1
    return out


def _scene_facade_arrays(scene: PolygonScene) -> dict:
    cached = getattr(scene, "_facade_arrays", None)
    if cached is None:
        cached = facade_arrays(scene.facades())
        scene._facade_arrays = cached
    return cached


def ground_plane_height(scene: PolygonScene, bs, ue, samples: int = 17) -> float:
    t = np.linspace(0.0, 1.0, samples)
    xy = bs[:2] + t[:, None] * (ue[:2] - bs[:2])
    z = np.asarray(scene.ground_at(xy[:, 0], xy[:, 1]), dtype=np.float64)
    z = z[np.isfinite(z)]
    return float(z.mean()) if len(z) else 0.0


def _legs_clear(scene: PolygonScene, pts: Sequence[np.ndarray], counter: FlopCounter, n_fac: int) -> bool:
    for a, b in zip(pts[:-1], pts[1:]):
        counter.occlusion_facades += n_fac
        if scene.segment_blocked(a, b):
            return False
    return True


def find_paths(scene: PolygonScene, bs_pos3d, ue_pos3d, max_order: int = 1, max_paths: int = 4,
               include_ground: bool = True, facades: Optional[Sequence] = None,
               counter: Optional[FlopCounter] = None) -> List[ReflectedPath]:
    """LOS (when clear) followed by up to ``max_paths`` reflected paths.

    Reflected paths are ordered by bounce count, then total length.
    ``facades`` overrides the scene's facade list (used for single-wall checks).
    """
    if max_order not in (1, 2):
        raise ValueError("max_order must be 1 or 2")
    if max_paths < 1:
        raise ValueError("max_paths must be >= 1")
    bs = np.asarray(bs_pos3d, dtype=np.float64)
    ue = np.asarray(ue_pos3d, dtype=np.float64)
    counter = counter if counter is not None else FlopCounter()
    fac = list(scene.facades()) if facades is None else list(facades)
    n_fac = len(fac)
    gz = ground_plane_height(scene, bs, ue) if include_ground else None
    if gz is not None and (bs[2] <= gz + _EPS or ue[2] <= gz + _EPS):
        gz = None
    planes = _Planes(fac, gz, _scene_facade_arrays(scene) if facades is None else None)

    out: List[ReflectedPath] = []
    counter.los += 1
    if _legs_clear(scene, [bs, ue], counter, n_fac):
        out.append(ReflectedPath(np.array([bs, ue])))

    reflected: List[ReflectedPath] = []
    P = len(planes)
    if P:
        counter.mirrors += P
        counter.intersections += P
        front = (planes.side(bs) > _EPS) & (planes.side(ue) > _EPS)
        img = planes.mirror(bs)
        pts, ok = planes.hit(img, ue[None, :])
        for i in np.flatnonzero(front & ok):
            path = [bs, pts[i], ue]
            if _legs_clear(scene, path, counter, n_fac):
                reflected.append(ReflectedPath(np.array(path), (planes.labels[i],), (planes.normal[i].copy(),)))

    if max_order == 2 and P > 1:
        reflected.extend(_second_order(scene, planes, bs, ue, counter, n_fac))

    reflected.sort(key=lambda p: (p.order, p.d_ref))
    out.extend(reflected[:max_paths])
    return out


def _second_order(scene, planes: _Planes, bs, ue, counter: FlopCounter, n_fac: int) -> list:
    P = len(planes)
    ii, jj = np.meshgrid(np.arange(P), np.arange(P), indexing="ij")
    mask = ii != jj
    ii, jj = ii[mask], jj[mask]
    counter.mirrors += len(ii)
    bs_front = planes.side(bs) > _EPS
    img1 = planes.mirror(bs)  # (P, 3)
    i1 = img1[ii]
    # image must sit in front of the second plane, and the UE too
    keep = bs_front[ii] & (planes.side(i1, jj) > _EPS) & (planes.side(ue) > _EPS)[jj]
    ii, jj, i1 = ii[keep], jj[keep], i1[keep]
    if not len(ii):
        return []
    i2 = planes.mirror(i1, jj)
    counter.intersections += 2 * len(ii)
    p2, ok2 = planes.hit(i2, np.broadcast_to(ue, i2.shape), jj)
    p1, ok1 = planes.hit(i1, p2, ii)
    good = ok1 & ok2 & (planes.side(p2, ii) > _EPS)
    out = []
    for k in np.flatnonzero(good):
        path = [bs, p1[k], p2[k], ue]
        if _legs_clear(scene, path, counter, n_fac):
            i, j = ii[k], jj[k]
            out.append(ReflectedPath(np.array(path), (planes.labels[i], planes.labels[j]),
                                     (planes.normal[i].copy(), planes.normal[j].copy())))
    return out


def flops_empty_scene() -> int:
    """Cost proxy of a path search with no buildings (LOS test plus ground image)."""
    c = FlopCounter(mirrors=1, intersections=1, los=1)
    return c.flops


def build_embedding(paths: Sequence[ReflectedPath], n_ref: int = 1, n_nlos: int = 4) -> np.ndarray:
    """(n_nlos+1, 2*n_ref+3) matrix: LOS row, then reflected rows by (order, length)."""
    emb = np.zeros((n_nlos + 1, 2 * n_ref + 3))
    for p in paths:
        if p.order > n_ref:
            raise ValueError(f"path of order {p.order} exceeds N_ref={n_ref}")
    los = [p for p in paths if p.order == 0]
    if los:
        emb[0] = los[0].features(n_ref)
    refl = sorted((p for p in paths if p.order > 0), key=lambda p: (p.order, p.d_ref))
    for r, p in enumerate(refl[:n_nlos], start=1):
        emb[r] = p.features(n_ref)
    return emb


@dataclass
class EmbeddingSeries:
    embeddings: np.ndarray  # (T, n_nlos+1, 2*n_ref+3)
    paths: list
    flops: float  # mean per step

    @property
    def flat(self) -> np.ndarray:
        return self.embeddings.reshape(len(self.embeddings), -1)


def embedding_series(scene: PolygonScene, bs_pos3d, ue_points3d, n_ref: int = 1,
                     n_nlos: int = 4) -> EmbeddingSeries:
    ue = np.asarray(ue_points3d, dtype=np.float64)
    embs, all_paths, total = [], [], 0
    for p in ue:
        c = FlopCounter()
        paths = find_paths(scene, bs_pos3d, p, max_order=n_ref, max_paths=n_nlos, counter=c)
        total += c.flops
        all_paths.append(paths)
        embs.append(build_embedding(paths, n_ref, n_nlos))
    return EmbeddingSeries(np.array(embs), all_paths, total / max(len(ue), 1))


def channel_gain(paths: Sequence[ReflectedPath], wavelength: float, eta: float, rho: float) -> complex:
    a = 0j
    for p in paths:
        d = p.d_ref
        a += d ** (-eta) * rho ** p.order * np.exp(-2j * np.pi * d / wavelength)
    return a


def synthesize_rsrp(paths_per_step: Sequence[Sequence[ReflectedPath]], params: NetworkParamsSeries,
                    prop_config: Optional[PropagationConfig] = None,
                    synth_config: SyntheticChannelConfig = SyntheticChannelConfig(),
                    diffracted_los_db: Optional[np.ndarray] = None) -> RSRPSeries:
    """Coherent multipath received power with seeded Gaussian dB noise.

    The magnitude is referenced to 4*pi/lambda so a lone LOS path with eta=1
    reproduces free-space loss exactly. ``diffracted_los_db`` optionally adds,
    at steps without a clear LOS, the direct ray attenuated by that many dB.
    Steps left with no contribution get a -140 dBm floor and are flagged.
    """
    prop_config = prop_config or PropagationConfig()
    T = params.T
    if len(paths_per_step) != T:
        raise ValueError("need one path list per step")
    rng = np.random.default_rng(synth_config.seed)
    noise = rng.normal(0.0, synth_config.noise_sigma_db, T) if synth_config.noise_sigma_db > 0 else np.zeros(T)
    out = np.empty(T)
    floor = np.zeros(T, dtype=bool)
    base = params.P_t + prop_config.G_t + prop_config.G_r + prop_config.u
    eta = synth_config.eta
    for t, paths in enumerate(paths_per_step):
        lam = SPEED_OF_LIGHT / params.f_c[t]
        a = channel_gain(paths, lam, eta, synth_config.rho) if paths else 0j
        if diffracted_los_db is not None and not any(p.order == 0 for p in paths):
            d = params.D[t]
            att = 10.0 ** (-diffracted_los_db[t] / 20.0)
            a += d ** (-eta) * att * np.exp(-2j * np.pi * d / lam)
        mag = abs(a)
        if mag <= 0:
            out[t] = NO_PATH_FLOOR_DBM
            floor[t] = True
        else:
            out[t] = base[t] + 20 * math.log10(mag) - 20 * math.log10(4 * math.pi / lam)
    return RSRPSeries(out + noise, flags=floor)


def write_e_re_csv(series: EmbeddingSeries, path) -> None:
    flat = series.flat
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(f"c{i}" for i in range(flat.shape[1])) + "\n")
        for row in flat:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
