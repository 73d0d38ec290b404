"""Physics features along one street trajectory in a synthetic city.

Builds a small city, drives a UE down a street and prints, per step, the
propagation-model RSRP, the occlusion factor and how many reflected paths the
image method found.

    python3 demos/01_physics_features.py
"""

import warnings

import numpy as np

from rsrpdiff.dataset import CityConfig, FeatureConfig, compute_features, random_base_station, street_trajectory, synthetic_city
from rsrpdiff.geometry import polygonize
from rsrpdiff.propagation import RangeWarning

warnings.simplefilter("ignore", RangeWarning)

rng = np.random.default_rng(1)
city = CityConfig(n_blocks=4)
m = synthetic_city(rng, city)
scene = polygonize(m)
print(f"city {m.width}x{m.height} cells, {len(scene)} buildings")

traj = street_trajectory(rng, city, T=24)
bs = random_base_station(rng, city, m)
print(f"BS at ({bs.x:.0f}, {bs.y:.0f}), mast {bs.H_BS:.0f} m, carrier {bs.f_c_Hz / 1e9:.1f} GHz")

fb = compute_features(m, scene, bs, traj, FeatureConfig(fov_l=20.0))
n_refl = [sum(p.order > 0 for p in paths) for paths in fb.e_re.paths]
print(" t   D [m]  RSRP_calc  e_OF  reflections")
for t in range(0, fb.T, 3):
    print(f"{t:2d} {fb.network_params.D[t]:7.1f} {fb.rsrp_calc.values[t]:9.1f} {fb.e_of.e_of[t]:5.2f} {n_refl[t]:6d}")
print("embedding shape per step:", fb.e_re.embeddings.shape[1:], "| crop shape:", fb.micromaps.crops.shape[1:])
print(f"path-search cost estimate: {fb.e_re.flops:.0f} FLOPs per trajectory")
