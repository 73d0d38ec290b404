import math

import numpy as np
import pytest

from rsrpdiff.geometry import polygonize
from rsrpdiff.mapio import (BaseStation, GridMismatchError, MapValidationError, MultiAttributeMap,
                            NetworkParamsSeries, Raster, RasterParseError, Trajectory, TrajectoryError,
                            derive_network_params, format_raster, load_raster, load_scene, load_trajectory,
                            parse_raster, write_raster, write_trajectory)

HEADER = "ncols {c}\nnrows {r}\nxllcorner 0.0\nyllcorner 0.0\ncellsize {cs}\n"


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_load_raster_readback(tmp_path):
    r = load_raster(write(tmp_path, "a.grid", HEADER.format(c=2, r=2, cs=1.0) + "1 2\n3 4\n"))
    assert r[0][1] == 2
    assert r.values.shape == (2, 2)


def test_row_length_mismatch_names_line(tmp_path):
    p = write(tmp_path, "a.grid", HEADER.format(c=3, r=1, cs=1.0) + "1 2\n")
    with pytest.raises(RasterParseError) as err:
        load_raster(p)
    assert err.value.line == 6


def test_non_numeric_cell():
    with pytest.raises(RasterParseError) as err:
        parse_raster(HEADER.format(c=2, r=1, cs=1.0) + "1 x\n")
    assert err.value.line == 6


def test_nodata_flagged():
    r = parse_raster(HEADER.format(c=2, r=1, cs=1.0) + "nodata_value -9999\n5 -9999\n")
    assert r.nodata_mask.tolist() == [[False, True]]


def test_raster_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    r = Raster(rng.normal(size=(4, 5)) * 1e3, 2.5, 10.0, -3.0, -9999.0)
    p = tmp_path / "r.grid"
    write_raster(r, p)
    text = p.read_bytes()
    write_raster(load_raster(p), tmp_path / "r2.grid")
    assert (tmp_path / "r2.grid").read_bytes() == text
    assert np.array_equal(load_raster(p).values, r.values)


def test_load_scene_ok_and_mismatch(tmp_path):
    body = "\n".join(" ".join("1" for _ in range(64)) for _ in range(64)) + "\n"
    a = write(tmp_path, "a.grid", HEADER.format(c=64, r=64, cs=2.0) + body)
    b = write(tmp_path, "b.grid", HEADER.format(c=64, r=64, cs=2.0) + body)
    m = load_scene(a, b)
    assert (m.height, m.width) == (64, 64)
    c = write(tmp_path, "c.grid", HEADER.format(c=64, r=64, cs=2.5) + body)
    with pytest.raises(GridMismatchError) as err:
        load_scene(a, c)
    assert "2.5" in str(err.value) and "2.0" in str(err.value)


def test_negative_building_height_rejected():
    with pytest.raises(MapValidationError):
        MultiAttributeMap(np.zeros((2, 2)), np.array([[0, -1.0], [0, 0]]), 1.0)


def test_trajectory_csv(tmp_path, flat_map):
    m = flat_map(16, 16, 5.0)
    pts = np.column_stack([np.linspace(1, 70, 64), np.full(64, 30.0)])
    p = tmp_path / "t.csv"
    write_trajectory(Trajectory(pts), p)
    assert load_trajectory(p, m).T == 64

    bad = pts.copy()
    bad[5, 0] = 80.0 + 5.0
    write_trajectory(Trajectory(bad), p)
    with pytest.raises(TrajectoryError, match="point 5"):
        load_trajectory(p, m)

    p.write_text("t,x,y\n0,1,1\n")
    with pytest.raises(TrajectoryError):
        load_trajectory(p)


def test_pythagoras_case(flat_map):
    m = flat_map(40, 40, 5.0)
    bs = BaseStation(x=10.0, y=100.0, H_BS=30.0)
    tr = Trajectory([[50.0, 100.0], [10.0, 100.0]], ue_height=1.5)
    p = derive_network_params(m, bs, tr)
    assert p.L[0] == pytest.approx(40.0)
    assert p.D[0] == pytest.approx(math.sqrt(1600 + 812.25), abs=1e-12)
    assert p.D[0] == pytest.approx(49.115, abs=1e-3)
    # UE straight below the antenna
    assert p.L[1] == 0.0
    assert p.D[1] == pytest.approx(30.0 - 1.5)
    p.validate()


def test_nodata_altitude_under_trajectory():
    nod = np.zeros((10, 10), dtype=bool)
    nod[5, 5] = True
    m = MultiAttributeMap(np.zeros((10, 10)), np.zeros((10, 10)), 1.0, nodata=nod)
    with pytest.raises(MapValidationError):
        derive_network_params(m, BaseStation(0.5, 0.5, 20.0), Trajectory([[5.5, 4.5], [1, 1]]))


def test_angles_on_boresight(flat_map):
    m = flat_map(40, 40, 5.0)
    bs = BaseStation(x=0.0, y=100.0, H_BS=30.0, downtilt_rad=math.atan2(28.5, 100.0), azimuth_rad=0.0)
    p = derive_network_params(m, bs, Trajectory([[100.0, 100.0], [0.0, 200.0]]))
    assert p.alpha[0] == pytest.approx(0.0, abs=1e-7)
    assert p.beta[0] == pytest.approx(0.0, abs=1e-12)
    assert p.gamma[0] == pytest.approx(0.0, abs=1e-12)
    assert p.gamma[1] == pytest.approx(math.pi / 2)


def cell_walk_count(m: MultiAttributeMap, p0, p1, step=0.01):
    """Count distinct building regions met by dense sampling of the segment."""
    from scipy import ndimage

    labels, _ = ndimage.label(m.building_height > 0)
    n = int(np.hypot(*(np.subtract(p1, p0))) / step) + 2
    t = np.linspace(0, 1, n)
    xs = p0[0] + t * (p1[0] - p0[0])
    ys = p0[1] + t * (p1[1] - p0[1])
    r, c = m.cell_index(xs, ys)
    return len(set(labels[r, c].tolist()) - {0})


def random_rect_map(rng, size=40, cell=2.0, n=5):
    bh = np.zeros((size, size))
    for _ in range(n):
        r0, c0 = rng.integers(1, size - 8, 2)
        h, w = rng.integers(2, 7, 2)
        bh[r0:r0 + h, c0:c0 + w] = 12.0
    return MultiAttributeMap(np.zeros((size, size)), bh, cell)


def test_n_b_matches_cell_walk_oracle():
    rng = np.random.default_rng(4)
    checked = 0
    for _ in range(20):
        m = random_rect_map(rng)
        scene = polygonize(m)
        if len(scene) != len(set(np.unique(__import__("scipy").ndimage.label(m.building_height > 0)[0])) - {0}):
            continue  # merged rectangles can form non-convex regions
        ext = m.extent[2]
        bs = BaseStation(float(rng.uniform(0, ext)), float(rng.uniform(0, ext)), 25.0)
        pts = rng.uniform(0.5, ext - 0.5, (6, 2))
        p = derive_network_params(m, bs, Trajectory(pts), scene)
        for t in range(6):
            oracle = cell_walk_count(m, (bs.x, bs.y), pts[t])
            # grazing a corner can differ by one cell-walk sample; only accept exact agreement elsewhere
            assert abs(p.N_b[t] - oracle) <= 0 or _grazes(scene, (bs.x, bs.y), pts[t])
            checked += 1
    assert checked >= 30


def _grazes(scene, p0, p1, tol=0.05):
    from rsrpdiff.geometry import segment_inside_intervals

    L = np.hypot(p1[0] - p0[0], p1[1] - p0[1])
    for b in scene.buildings:
        for ta, tb in segment_inside_intervals(np.array(p0), np.array(p1), b.footprint, 0.0):
            if (tb - ta) * L < tol:
                return True
    return False


def test_translation_invariance():
    rng = np.random.default_rng(1)
    m = random_rect_map(rng)
    bs = BaseStation(10.0, 70.0, 25.0, downtilt_rad=0.12, azimuth_rad=0.7)
    tr = Trajectory(rng.uniform(1, 79, (10, 2)))
    a = derive_network_params(m, bs, tr)
    dx, dy = 1234.5, -987.25
    b = derive_network_params(m.shifted(dx, dy), bs.shifted(dx, dy), tr.shifted(dx, dy))
    np.testing.assert_allclose(a.values[:, 4:], b.values[:, 4:], rtol=1e-9, atol=1e-9)


def test_params_series_column_access():
    v = np.arange(20, dtype=float).reshape(2, 10)
    s = NetworkParamsSeries(v)
    assert s.N_b.tolist() == [9.0, 19.0]
    with pytest.raises(ValueError):
        NetworkParamsSeries(np.zeros((2, 9)))
