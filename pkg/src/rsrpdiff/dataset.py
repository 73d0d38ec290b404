"""Feature bundles, a synthetic street-grid city and packed training datasets."""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import mapio
from .geometry import PolygonScene, polygonize
from .mapio import BaseStation, MultiAttributeMap, NetworkParamsSeries, RSRPSeries, Trajectory
from .micromap import EnhancedMap, MicroMapSeries, coordinate_crops, hessian_enhance, serialize, write_micromaps
from .multipath import EmbeddingSeries, SyntheticChannelConfig, embedding_series, synthesize_rsrp, write_e_re_csv
from .occlusion import OcclusionConfig, OcclusionSeries, occlusion_factor, write_e_of_csv
from .propagation import PropagationConfig, RangeWarning, rsrp_calc

log = logging.getLogger(__name__)

CARRIERS_HZ = (900e6, 1.8e9, 3.5e9)


@dataclass
class FeatureConfig:
    n_ref: int = 1
    n_nlos: int = 4
    fov_l: float = 85.0
    prop: PropagationConfig = field(default_factory=PropagationConfig)
    occlusion: OcclusionConfig = field(default_factory=OcclusionConfig)

    @property
    def e_re_dim(self) -> int:
        return (self.n_nlos + 1) * (2 * self.n_ref + 3)


@dataclass
class FeatureBundle:
    network_params: NetworkParamsSeries
    rsrp_calc: RSRPSeries
    e_of: Optional[OcclusionSeries] = None
    e_re: Optional[EmbeddingSeries] = None
    micromaps: Optional[MicroMapSeries] = None
    coords: Optional[np.ndarray] = None

    @property
    def T(self) -> int:
        return self.network_params.T


def _quiet(fn, *args, **kwargs):
    # model validity ranges are routinely exceeded at street scale; warn once per call site
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RangeWarning)
        return fn(*args, **kwargs)


def compute_features(map_: MultiAttributeMap, scene: PolygonScene, bs: BaseStation, traj: Trajectory,
                     cfg: FeatureConfig = FeatureConfig(), enhanced: Optional[EnhancedMap] = None,
                     full: bool = True) -> FeatureBundle:
    """All condition streams for one trajectory; ``full=False`` stops after RSRP_calc."""
    params = mapio.derive_network_params(map_, bs, traj, scene)
    calc = _quiet(rsrp_calc, params, cfg.prop)
    if not full:
        return FeatureBundle(params, calc)
    ue3 = np.column_stack([traj.points, params.h_r])
    occ = occlusion_factor(scene, bs.position3d, ue3, bs.f_c_Hz, cfg.occlusion)
    emb = embedding_series(scene, bs.position3d, ue3, cfg.n_ref, cfg.n_nlos)
    enhanced = enhanced if enhanced is not None else hessian_enhance(map_, fill_nodata=True)
    mm = serialize(enhanced, traj, cfg.fov_l)
    return FeatureBundle(params, calc, occ, emb, mm, coordinate_crops(enhanced, mm))


def write_features(bundle: FeatureBundle, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "network_params.csv", "w", encoding="utf-8") as fh:
        fh.write("t," + ",".join(mapio.NETWORK_PARAM_NAMES) + "\n")
        for t, row in enumerate(bundle.network_params.values):
            fh.write(f"{t}," + ",".join(repr(float(v)) for v in row) + "\n")
    write_series_csv(bundle.rsrp_calc.values, out / "rsrp_calc.csv")
    if bundle.e_of is not None:
        write_e_of_csv(bundle.e_of, out / "e_of.csv")
    if bundle.e_re is not None:
        write_e_re_csv(bundle.e_re, out / "e_re.csv")
        (out / "flops.json").write_text(json.dumps({"e_re_flops": bundle.e_re.flops}), encoding="utf-8")
    if bundle.micromaps is not None:
        write_micromaps(bundle.micromaps, out / "micromaps.bin", bundle.coords)


def write_series_csv(values, path, column: str = "rsrp_dbm") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"t,{column}\n")
        for t, v in enumerate(values):
            fh.write(f"{t},{float(v)!r}\n")


def read_series_csv(path) -> np.ndarray:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1]


def read_features(feat_dir) -> dict:
    """Arrays keyed like ``SequenceDataset`` fields, for a single sample."""
    from .micromap import read_micromaps

    d = Path(feat_dir)
    out = {
        "network_params": np.loadtxt(d / "network_params.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1:],
        "rsrp_calc": read_series_csv(d / "rsrp_calc.csv"),
    }
    if (d / "e_of.csv").exists():
        out["e_of"] = np.loadtxt(d / "e_of.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1]
    if (d / "e_re.csv").exists():
        out["e_re"] = np.loadtxt(d / "e_re.csv", delimiter=",", skiprows=1, ndmin=2)
    if (d / "micromaps.bin").exists():
        crops, coords, _ = read_micromaps(d / "micromaps.bin")
        out["crops"] = crops.astype(np.float64)
        if coords is not None:
            out["coords"] = coords.astype(np.float64)
    return out


# --- synthetic city -------------------------------------------------------

@dataclass(frozen=True)
class CityConfig:
    n_blocks: int = 6
    block_m: float = 48.0
    street_m: float = 16.0
    cell_size: float = 4.0
    min_height: float = 6.0
    max_height: float = 30.0
    park_fraction: float = 0.15
    terrain_amp: float = 4.0

    @property
    def pitch(self) -> float:
        return self.block_m + self.street_m

    @property
    def size_m(self) -> float:
        return self.n_blocks * self.pitch + self.street_m

    def street_centers(self) -> np.ndarray:
        return self.street_m / 2 + self.pitch * np.arange(self.n_blocks + 1)


def synthetic_city(rng: np.random.Generator, cfg: CityConfig = CityConfig()) -> MultiAttributeMap:
    """Street grid of rectangular lots on gently undulating terrain."""
    n = int(round(cfg.size_m / cfg.cell_size))
    cs = cfg.cell_size
    xc = (np.arange(n) + 0.5) * cs
    yc = xc[::-1]
    X, Y = np.meshgrid(xc, yc)
    tilt = rng.uniform(-1, 1, 2) * cfg.terrain_amp / cfg.size_m
    phase = rng.uniform(0, 2 * np.pi, 2)
    alt = (tilt[0] * X + tilt[1] * Y
           + 0.5 * cfg.terrain_amp * np.sin(2 * np.pi * X / cfg.size_m + phase[0])
           * np.cos(2 * np.pi * Y / cfg.size_m + phase[1]))
    alt = alt - alt.min()
    bh = np.zeros((n, n))
    for bi in range(cfg.n_blocks):
        for bj in range(cfg.n_blocks):
            if rng.random() < cfg.park_fraction:
                continue
            x0 = cfg.street_m + bi * cfg.pitch
            y0 = cfg.street_m + bj * cfg.pitch
            # one or two buildings per block, split along a random axis
            lots = [(x0, y0, cfg.block_m, cfg.block_m)]
            if rng.random() < 0.5:
                cut = cfg.block_m * rng.uniform(0.35, 0.65)
                gap = 2 * cs
                if rng.random() < 0.5:
                    lots = [(x0, y0, cut - gap / 2, cfg.block_m), (x0 + cut + gap / 2, y0, cfg.block_m - cut - gap / 2, cfg.block_m)]
                else:
                    lots = [(x0, y0, cfg.block_m, cut - gap / 2), (x0, y0 + cut + gap / 2, cfg.block_m, cfg.block_m - cut - gap / 2)]
            for lx, ly, w, h in lots:
                inset = rng.uniform(0, 0.15) * min(w, h)
                m = (X >= lx + inset) & (X <= lx + w - inset) & (Y >= ly + inset) & (Y <= ly + h - inset)
                bh[m] = rng.uniform(cfg.min_height, cfg.max_height)
    return MultiAttributeMap(alt, bh, cs, (0.0, 0.0))


def street_trajectory(rng: np.random.Generator, cfg: CityConfig, T: int, step_m: float = 3.0,
                      ue_height: float = 1.5, turn_prob: float = 0.4) -> Trajectory:
    """Random walk along street centerlines with turns at intersections."""
    centers = cfg.street_centers()
    lo, hi = centers[0], centers[-1]
    horizontal = rng.random() < 0.5
    line = rng.choice(centers)
    along = rng.uniform(lo, hi)
    direction = rng.choice([-1.0, 1.0])
    pts = []
    for _ in range(T):
        pts.append((along, line) if horizontal else (line, along))
        nxt = along + direction * step_m
        crossed = centers[(centers - along) * (centers - nxt) < 0]
        if len(crossed) and rng.random() < turn_prob:
            c = float(crossed[0])
            rest = abs(nxt - c)
            # at the intersection the cross street becomes the line we walk on
            along, line = line, c
            horizontal = not horizontal
            direction = rng.choice([-1.0, 1.0])
            nxt = along + direction * rest
        if nxt < lo or nxt > hi:
            direction = -direction
            nxt = min(max(2 * (lo if nxt < lo else hi) - nxt, lo), hi)
        along = nxt
    return Trajectory(np.array(pts), ue_height)


def random_base_station(rng: np.random.Generator, cfg: CityConfig, map_: MultiAttributeMap) -> BaseStation:
    centers = cfg.street_centers()
    if rng.random() < 0.5:
        x, y = rng.choice(centers), rng.uniform(centers[0], centers[-1])
    else:
        x, y = rng.uniform(centers[0], centers[-1]), rng.choice(centers)
    al = float(map_.sample_altitude(x, y)[0])
    return BaseStation(
        x=float(x), y=float(y), H_BS=float(rng.uniform(20, 40)), AL_BS=al,
        P_t_dBm=float(rng.uniform(40, 46)), f_c_Hz=float(rng.choice(CARRIERS_HZ)),
        downtilt_rad=float(rng.uniform(0.03, 0.15)), azimuth_rad=float(rng.uniform(-math.pi, math.pi)),
    )


@dataclass
class SequenceDataset:
    """Stacked per-sample arrays, all sharing (N, T)."""

    network_params: np.ndarray
    rsrp_calc: np.ndarray
    rsrp_real: Optional[np.ndarray] = None
    e_of: Optional[np.ndarray] = None
    e_re: Optional[np.ndarray] = None
    crops: Optional[np.ndarray] = None
    coords: Optional[np.ndarray] = None
    flops: Optional[np.ndarray] = None

    FIELDS = ("network_params", "rsrp_calc", "rsrp_real", "e_of", "e_re", "crops", "coords", "flops")

    def __post_init__(self):
        N, T = self.network_params.shape[:2]
        for name in self.FIELDS:
            v = getattr(self, name)
            if v is not None and name != "flops" and v.shape[:2] != (N, T):
                raise ValueError(f"{name} has shape {v.shape}, expected leading {(N, T)}")

    def __len__(self) -> int:
        return self.network_params.shape[0]

    @property
    def T(self) -> int:
        return self.network_params.shape[1]

    def subset(self, idx) -> "SequenceDataset":
        idx = np.asarray(idx)
        return SequenceDataset(**{k: (None if getattr(self, k) is None else getattr(self, k)[idx]) for k in self.FIELDS})

    def crop_time(self, T: int, start: int = 0) -> "SequenceDataset":
        kw = {}
        for k in self.FIELDS:
            v = getattr(self, k)
            kw[k] = None if v is None or k == "flops" else v[:, start:start + T]
        kw["flops"] = self.flops
        return SequenceDataset(**kw)

    def save(self, path) -> None:
        arrays = {k: getattr(self, k) for k in self.FIELDS if getattr(self, k) is not None}
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "SequenceDataset":
        with np.load(path) as z:
            return cls(**{k: z[k] for k in z.files})

    @classmethod
    def from_samples(cls, samples: list) -> "SequenceDataset":
        keys = samples[0].keys()
        return cls(**{k: np.stack([s[k] for s in samples]) for k in keys})


def bundle_arrays(bundle: FeatureBundle, real: Optional[np.ndarray] = None) -> dict:
    out = {"network_params": bundle.network_params.values, "rsrp_calc": bundle.rsrp_calc.values}
    if real is not None:
        out["rsrp_real"] = np.asarray(real)
    if bundle.e_of is not None:
        out["e_of"] = bundle.e_of.e_of
    if bundle.e_re is not None:
        out["e_re"] = bundle.e_re.flat
        out["flops"] = np.float64(bundle.e_re.flops)
    if bundle.micromaps is not None:
        out["crops"] = bundle.micromaps.crops
        out["coords"] = bundle.coords
    return out


@dataclass
class SynthConfig:
    n_samples: int = 200
    T: int = 64
    step_m: float = 3.0
    full: bool = True
    noise_sigma_db: float = 2.0
    rho: float = 0.3
    eta: float = 1.0
    diffraction: bool = True
    max_tries: int = 20
    city: CityConfig = field(default_factory=CityConfig)
    features: FeatureConfig = field(default_factory=lambda: FeatureConfig(fov_l=20.0))


def _sample_entry(rng, cfg: SynthConfig, map_, scene, enhanced, seed_noise: int) -> tuple:
    for _ in range(cfg.max_tries):
        bs = random_base_station(rng, cfg.city, map_)
        traj = street_trajectory(rng, cfg.city, cfg.T, cfg.step_m)
        bundle = compute_features(map_, scene, bs, traj, cfg.features, enhanced, full=cfg.full)
        if not cfg.full:
            return bs, traj, bundle, None
        paths = bundle.e_re.paths
        if cfg.diffraction or all(len(p) for p in paths):
            sc = SyntheticChannelConfig(cfg.eta, cfg.rho, cfg.noise_sigma_db, seed_noise)
            diff = bundle.e_of.max_L_d if cfg.diffraction else None
            real = synthesize_rsrp(paths, bundle.network_params, cfg.features.prop, sc, diff)
            return bs, traj, bundle, real.values
    raise RuntimeError(f"no fully reachable trajectory after {cfg.max_tries} tries")


def generate_dataset(out_dir, cfg: SynthConfig, seed: int, map_: Optional[MultiAttributeMap] = None,
                     write_samples: bool = True) -> SequenceDataset:
    """Synthesize ``cfg.n_samples`` trajectories over one city and write the dataset directory.

    Layout: alt.grid, bld.grid, scene.jsonl, manifest.json, samples/NNNNN/{trajectory.csv,
    bs.json, target_rsrp.csv, features/} and a packed dataset.npz.
    Trajectories where some step has no propagation path at all are redrawn.
    """
    out = Path(out_dir) if out_dir is not None else None
    root = np.random.SeedSequence(seed)
    city_seq, sample_seq = root.spawn(2)
    if map_ is None:
        map_ = synthetic_city(np.random.default_rng(city_seq), cfg.city)
    else:
        ext = map_.extent
        n = max(1, int((min(ext[2] - ext[0], ext[3] - ext[1]) - cfg.city.street_m) // cfg.city.pitch))
        cfg.city = CityConfig(**{**cfg.city.__dict__, "n_blocks": n, "cell_size": map_.cell_size})
    scene = polygonize(map_)
    enhanced = hessian_enhance(map_, fill_nodata=True) if cfg.full else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        alt, bh = map_.to_rasters()
        mapio.write_raster(alt, out / "alt.grid")
        mapio.write_raster(bh, out / "bld.grid")
        scene.to_jsonl(out / "scene.jsonl")
    samples, manifest = [], []
    for i, s in enumerate(sample_seq.spawn(cfg.n_samples)):
        rng = np.random.default_rng(s)
        noise_seed = int(s.generate_state(1)[0])
        bs, traj, bundle, real = _sample_entry(rng, cfg, map_, scene, enhanced, noise_seed)
        samples.append(bundle_arrays(bundle, real))
        if out is not None and write_samples:
            sd = out / "samples" / f"{i:05d}"
            sd.mkdir(parents=True, exist_ok=True)
            mapio.write_trajectory(traj, sd / "trajectory.csv")
            mapio.write_bs_record(bs, sd / "bs.json")
            write_features(bundle, sd / "features")
            entry = {"trajectory": f"samples/{i:05d}/trajectory.csv", "bs": f"samples/{i:05d}/bs.json",
                     "features": f"samples/{i:05d}/features"}
            if real is not None:
                write_series_csv(real, sd / "target_rsrp.csv")
                entry["target_rsrp"] = f"samples/{i:05d}/target_rsrp.csv"
            manifest.append(entry)
    ds = SequenceDataset.from_samples(samples)
    if out is not None:
        if write_samples:
            mapio.write_manifest(manifest, out / "manifest.json")
        ds.save(out / "dataset.npz")
    return ds


def load_dataset(data_dir) -> SequenceDataset:
    """Packed arrays when present, otherwise read the manifest's per-sample files."""
    d = Path(data_dir)
    if (d / "dataset.npz").exists():
        return SequenceDataset.load(d / "dataset.npz")
    entries = mapio.load_manifest(d / "manifest.json")
    samples = []
    for e in entries:
        if "features" not in e:
            raise ValueError("manifest entries need a 'features' directory")
        arrs = read_features(e["features"])
        if e.get("target_rsrp"):
            arrs["rsrp_real"] = read_series_csv(e["target_rsrp"])
        samples.append(arrs)
    return SequenceDataset.from_samples(samples)


def split_indices(n: int, fractions=(0.8, 0.1, 0.1), seed: int = 0) -> tuple:
    perm = np.random.default_rng(seed).permutation(n)
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    return perm[:a], perm[a:b], perm[b:]
