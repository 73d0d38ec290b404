import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsrpdiff.mapio import MultiAttributeMap, Trajectory
from rsrpdiff.micromap import (EnhancedMap, coordinate_crops, coordinate_encoding, crop_size, edge_response,
                               hessian_enhance, read_micromaps, serialize, write_micromaps)


def make_map(alt, bld=None, cell=5.0, nodata=None):
    alt = np.asarray(alt, dtype=float)
    bld = np.zeros_like(alt) if bld is None else np.asarray(bld, dtype=float)
    return MultiAttributeMap(alt, bld, cell, (0.0, 0.0), nodata=nodata)


@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-100, 100))
@settings(max_examples=40)
def test_affine_unchanged(a, b, c):
    yy, xx = np.mgrid[0:12, 0:9]
    img = a * xx + b * yy + c
    out = hessian_enhance(make_map(img, img * 0 + 3.0))
    np.testing.assert_allclose(out.channels[0], img, atol=1e-9)
    np.testing.assert_allclose(out.channels[1], 3.0, atol=1e-12)


def test_step_linear_in_height():
    base = np.zeros((9, 9))
    r1 = edge_response(np.where(np.arange(9)[None, :] >= 5, 2.0, 0.0) + base)
    r2 = edge_response(np.where(np.arange(9)[None, :] >= 5, 4.0, 0.0) + base)
    np.testing.assert_allclose(r2, 2 * r1)
    peak_cols = set(np.argwhere(r1 == r1.max())[:, 1].tolist())
    assert peak_cols <= {4, 5}


def test_nodata_policy():
    alt = np.ones((5, 5))
    nod = np.zeros((5, 5), dtype=bool)
    nod[2, 2] = True
    m = make_map(alt, nodata=nod)
    with pytest.raises(ValueError, match="nodata"):
        hessian_enhance(m)
    out = hessian_enhance(m, fill_nodata=True)
    assert np.all(np.isfinite(out.channels))
    np.testing.assert_allclose(out.channels[0], 1.0)


def test_coordinate_encoding_cases():
    P = coordinate_encoding(3, 3)
    assert P.shape == (2, 3, 3)
    assert tuple(P[:, 1, 1]) == (0.0, 0.0)
    assert tuple(P[:, 2, 0]) == (-1.0, -1.0)  # bottom-left
    assert tuple(P[:, 0, 2]) == (1.0, 1.0)
    Q = coordinate_encoding(5, 1)
    assert np.all(Q[1] == 0.0)
    assert Q[0, 0, 0] == -1.0 and Q[0, 0, -1] == 1.0


def test_crop_size_and_shapes():
    assert crop_size(85.0, 5.0) == 17
    with pytest.raises(ValueError):
        crop_size(2.0, 5.0)
    rng = np.random.default_rng(0)
    m = make_map(rng.normal(size=(40, 40)), cell=5.0)
    enh = hessian_enhance(m)
    tr = Trajectory(np.column_stack([np.linspace(50, 150, 64), np.full(64, 100.0)]))
    s = serialize(enh, tr, 85.0)
    assert s.crops.shape == (64, 2, 17, 17)


def test_interior_crop_is_slice():
    rng = np.random.default_rng(1)
    ch = rng.normal(size=(2, 30, 30))
    enh = EnhancedMap(ch, 1.0, (0.0, 0.0))
    # point (15.5, 14.5) sits in column 15, row 30-1-14 = 15
    s = serialize(enh, np.array([[15.5, 14.5], [3.0, 3.0]]), 5.0)
    np.testing.assert_array_equal(s.crops[0], ch[:, 13:18, 13:18])


def test_corner_crop_replicates_border():
    ch = np.arange(2 * 6 * 6, dtype=float).reshape(2, 6, 6)
    enh = EnhancedMap(ch, 1.0, (0.0, 0.0))
    s = serialize(enh, np.array([[0.5, 5.5], [1, 1]]), 5.0)  # top-left cell
    c = s.crops[0]
    np.testing.assert_array_equal(c[:, 2:, 2:], ch[:, 0:3, 0:3])
    np.testing.assert_array_equal(c[:, 0, 0], ch[:, 0, 0])
    np.testing.assert_array_equal(c[:, :2, 2], np.repeat(ch[:, 0:1, 0], 2, axis=1))


def test_identical_points_identical_crops_and_io(tmp_path):
    rng = np.random.default_rng(2)
    enh = EnhancedMap(rng.normal(size=(2, 20, 20)), 2.0, (0.0, 0.0))
    s = serialize(enh, np.array([[10.0, 10.0], [10.0, 10.0], [30.0, 5.0]]), 10.0)
    assert np.array_equal(s.crops[0], s.crops[1])
    coords = coordinate_crops(enh, s)
    assert coords.shape == s.crops.shape
    write_micromaps(s, tmp_path / "m.bin", coords)
    crops, cc, meta = read_micromaps(tmp_path / "m.bin")
    np.testing.assert_array_equal(crops, s.crops.astype(np.float32))
    np.testing.assert_array_equal(cc, coords.astype(np.float32))
    assert meta["S"] == 5
