import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rsrpdiff.metrics import MetricReport, cdf_report, jsd, mae, nrmse, performance_density, rank_models

floats = st.lists(st.floats(-150, -40), min_size=2, max_size=60)


def test_jsd_cases():
    rng = np.random.default_rng(0)
    p = rng.normal(-90, 5, 500)
    assert jsd(p, p) <= 1e-12
    assert jsd(np.full(50, -100.0), np.full(50, -60.0)) == pytest.approx(math.log(2), abs=1e-9)
    with pytest.raises(ValueError):
        jsd([], p)


@given(floats, floats)
@settings(max_examples=60)
def test_jsd_symmetric_and_bounded(p, q):
    a, b = jsd(p, q), jsd(q, p)
    assert a == pytest.approx(b, abs=1e-12)
    assert 0.0 <= a <= math.log(2)


def test_nrmse_mae_hand_cases():
    y, yh = [-80.0, -90.0], [-82.0, -86.0]
    assert nrmse(y, yh) == pytest.approx(0.31623, abs=1e-5)
    assert mae(y, yh) == pytest.approx(3.0, abs=1e-12)
    assert nrmse(y, y) == 0.0 and mae(y, y) == 0.0
    assert nrmse(np.multiply(y, 2), np.multiply(yh, 2)) == pytest.approx(nrmse(y, yh), rel=1e-12)
    assert mae(y[::-1], yh[::-1]) == mae(y, yh)
    with pytest.raises(ZeroDivisionError):
        nrmse([1.0, 1.0], [0.0, 2.0])
    with pytest.raises(ValueError):
        mae([1.0], [1.0, 2.0])


def test_rank_rules():
    rows = [dict(name="a", jsd=0.1, nrmse=0.1, mae=1.0), dict(name="b", jsd=0.2, nrmse=0.2, mae=2.0),
            dict(name="c", jsd=0.3, nrmse=0.3, mae=3.0)]
    t = rank_models(rows)
    assert [r.name for r in t.rows] == ["a", "b", "c"]
    assert t.rows[0].r_avg == 3 and t.rows[-1].r_avg == 9
    tie = rank_models([dict(name="x", jsd=0.1, nrmse=0.2, mae=1.0), dict(name="y", jsd=0.1, nrmse=0.3, mae=2.0)])
    assert {r.name: r.r_avg for r in tie.rows} == {"x": 3, "y": 5}
    with pytest.raises(ValueError):
        rank_models(rows[:1])


def test_performance_density():
    assert performance_density(0.2, 1e5) == pytest.approx(1.0, abs=1e-12)
    assert performance_density(0.2, 2e5) < performance_density(0.2, 1e5)
    assert performance_density(0.1, 1e5) == pytest.approx(2 * performance_density(0.2, 1e5))
    with pytest.raises(ValueError):
        performance_density(0.0, 1e5)


def test_cdf_cases(tmp_path):
    assert cdf_report(np.zeros(10)).fraction_below == 1.0
    assert cdf_report([5.0, 10.0]).fraction_below == 0.5
    rng = np.random.default_rng(1)
    rep = cdf_report(rng.normal(0, 6, 300))
    assert np.all(np.diff(rep.cdf) >= 0) and rep.cdf[-1] == 1.0
    assert np.allclose(np.diff(rep.grid), 0.5)
    rep.to_csv(tmp_path / "c.csv")
    assert (tmp_path / "c.csv").read_text().startswith("abs_error_db,cdf\n")


def test_metric_report_fields_finite():
    rng = np.random.default_rng(2)
    y = rng.normal(-90, 8, 200)
    r = MetricReport.evaluate(y, y + rng.normal(0, 2, 200))
    assert all(math.isfinite(v) for v in (r.jsd, r.nrmse, r.mae, r.cdf_9p5_fraction))
    assert set(r.to_dict()) == {"jsd", "nrmse", "mae", "n_samples", "cdf_9p5_fraction"}
