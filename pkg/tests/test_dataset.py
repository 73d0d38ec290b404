import numpy as np
import pytest

from rsrpdiff import mapio
from rsrpdiff.dataset import (CityConfig, SequenceDataset, SynthConfig, compute_features, generate_dataset,
                              load_dataset, random_base_station, read_features, split_indices, street_trajectory,
                              synthetic_city, write_features)
from rsrpdiff.geometry import polygonize

SMALL_CITY = CityConfig(n_blocks=3)


@pytest.fixture(scope="module")
def small_full(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    cfg = SynthConfig(n_samples=4, T=12, city=SMALL_CITY)
    return out, generate_dataset(out, cfg, seed=3)


def test_city_and_trajectory_stay_on_streets():
    rng = np.random.default_rng(0)
    m = synthetic_city(rng, SMALL_CITY)
    tr = street_trajectory(rng, SMALL_CITY, 40)
    assert tr.T == 40
    r, c = m.cell_index(tr.points[:, 0], tr.points[:, 1])
    assert np.all(m.building_height[r, c] == 0)
    bs = random_base_station(rng, SMALL_CITY, m)
    assert bs.H_BS > 0


def test_feature_bundle_shapes_and_io(tmp_path):
    rng = np.random.default_rng(1)
    m = synthetic_city(rng, SMALL_CITY)
    scene = polygonize(m)
    tr = street_trajectory(rng, SMALL_CITY, 10)
    bs = random_base_station(rng, SMALL_CITY, m)
    fb = compute_features(m, scene, bs, tr)
    assert fb.e_re.embeddings.shape == (10, 5, 5)
    assert fb.micromaps.crops.shape[:2] == (10, 2)
    assert np.all((fb.e_of.e_of > 0) & (fb.e_of.e_of <= 1))
    write_features(fb, tmp_path / "f")
    back = read_features(tmp_path / "f")
    np.testing.assert_allclose(back["network_params"], fb.network_params.values, rtol=1e-15)
    np.testing.assert_allclose(back["rsrp_calc"], fb.rsrp_calc.values, rtol=1e-15)
    for name in ("network_params.csv", "rsrp_calc.csv", "e_of.csv", "e_re.csv", "flops.json", "micromaps.bin"):
        assert (tmp_path / "f" / name).exists()


def test_generate_layout_and_reload(small_full):
    out, ds = small_full
    assert len(ds) == 4 and ds.T == 12
    for name in ("alt.grid", "bld.grid", "scene.jsonl", "manifest.json", "dataset.npz"):
        assert (out / name).exists()
    m = mapio.load_scene(out / "alt.grid", out / "bld.grid")
    assert m.width > 0
    back = load_dataset(out)
    np.testing.assert_array_equal(back.rsrp_real, ds.rsrp_real)
    assert np.all(np.isfinite(ds.rsrp_real))
    assert ds.crops.shape[:3] == (4, 12, 2)


def test_generation_deterministic():
    cfg = lambda: SynthConfig(n_samples=3, T=8, full=False, city=SMALL_CITY)
    a = generate_dataset(None, cfg(), seed=11)
    b = generate_dataset(None, cfg(), seed=11)
    assert np.array_equal(a.rsrp_calc, b.rsrp_calc)
    assert a.rsrp_real is None and a.e_re is None


def test_subset_crop_and_split():
    rng = np.random.default_rng(0)
    ds = SequenceDataset(network_params=rng.normal(size=(10, 20, 10)), rsrp_calc=rng.normal(size=(10, 20)))
    sub = ds.subset([1, 3]).crop_time(8, start=4)
    assert len(sub) == 2 and sub.T == 8
    np.testing.assert_array_equal(sub.rsrp_calc, ds.rsrp_calc[[1, 3], 4:12])
    tr, va, te = split_indices(100, (0.8, 0.1, 0.1), seed=1)
    assert (len(tr), len(va), len(te)) == (80, 10, 10)
    assert len(set(tr) | set(va) | set(te)) == 100
