"""Distribution and error metrics, rank aggregation and performance density."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

JSD_EPS = 1e-12
DEFAULT_BINS = 64
CDF_RESOLUTION_DB = 0.5
ERROR_THRESHOLD_DB = 9.5


def jsd(p_samples, q_samples, n_bins: int = DEFAULT_BINS) -> float:
    """Jensen-Shannon divergence (natural log) of two sample sets on shared equal-width bins."""
    p = np.asarray(p_samples, dtype=np.float64).ravel()
    q = np.asarray(q_samples, dtype=np.float64).ravel()
    if not len(p) or not len(q):
        raise ValueError("jsd needs non-empty sample sets")
    lo = min(p.min(), q.min())
    hi = max(p.max(), q.max())
    if hi <= lo:
        lo, hi = lo - 0.5, hi + 0.5
    hp, _ = np.histogram(p, bins=n_bins, range=(lo, hi))
    hq, _ = np.histogram(q, bins=n_bins, range=(lo, hi))
    pp = (hp + JSD_EPS) / (hp.sum() + n_bins * JSD_EPS)
    qq = (hq + JSD_EPS) / (hq.sum() + n_bins * JSD_EPS)
    m = 0.5 * (pp + qq)
    val = 0.5 * np.sum(pp * np.log(pp / m)) + 0.5 * np.sum(qq * np.log(qq / m))
    return float(min(max(val, 0.0), math.log(2)))


def _pair(y, yhat) -> tuple:
    y = np.asarray(y, dtype=np.float64).ravel()
    yhat = np.asarray(yhat, dtype=np.float64).ravel()
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    return y, yhat


def nrmse(y, yhat) -> float:
    """RMSE divided by the target range."""
    y, yhat = _pair(y, yhat)
    if len(y) < 2:
        raise ValueError("nrmse needs at least 2 values")
    span = y.max() - y.min()
    if span <= 0:
        raise ZeroDivisionError("nrmse undefined: target is constant (y_max == y_min)")
    return float(np.sqrt(np.mean((y - yhat) ** 2)) / span)


def mae(y, yhat) -> float:
    y, yhat = _pair(y, yhat)
    if not len(y):
        raise ValueError("mae needs at least 1 value")
    return float(np.mean(np.abs(y - yhat)))


@dataclass(frozen=True)
class CDFReport:
    fraction_below: float
    threshold: float
    grid: np.ndarray
    cdf: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("abs_error_db,cdf\n")
            for x, c in zip(self.grid, self.cdf):
                fh.write(f"{x!r},{c!r}\n")


def cdf_report(errors, threshold: float = ERROR_THRESHOLD_DB, resolution: float = CDF_RESOLUTION_DB) -> CDFReport:
    """Empirical CDF of |error| on a fixed dB grid, plus the fraction strictly below ``threshold``."""
    e = np.abs(np.asarray(errors, dtype=np.float64).ravel())
    if not len(e):
        raise ValueError("cdf_report needs at least one error")
    top = max(math.ceil(e.max() / resolution), math.ceil(threshold / resolution)) * resolution
    grid = np.round(np.arange(0.0, top + resolution / 2, resolution), 10)
    srt = np.sort(e)
    cdf = np.searchsorted(srt, grid, side="right") / len(e)
    return CDFReport(float(np.mean(e < threshold)), threshold, grid, cdf)


@dataclass(frozen=True)
class MetricReport:
    jsd: float
    nrmse: float
    mae: float
    n_samples: int
    cdf_9p5_fraction: float

    @classmethod
    def evaluate(cls, y, yhat, n_bins: int = DEFAULT_BINS) -> "MetricReport":
        y, yhat = _pair(y, yhat)
        return cls(jsd(y, yhat, n_bins), nrmse(y, yhat), mae(y, yhat), int(len(y)),
                   cdf_report(y - yhat).fraction_below)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class RankRow:
    name: str
    jsd: float
    nrmse: float
    mae: float
    r_avg: int


@dataclass(frozen=True)
class RankTable:
    rows: tuple
    flops_estimates: Optional[dict] = None

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows], "flops_estimates": self.flops_estimates}


def rank_models(rows: Sequence[dict], flops_estimates: Optional[dict] = None) -> RankTable:
    """Sum of per-metric ranks (1 = best, ties share the minimum rank), sorted ascending."""
    if len(rows) < 2:
        raise ValueError("ranking needs at least 2 rows")
    names = [r["name"] for r in rows]
    ranks = np.zeros(len(rows), dtype=np.int64)
    for key in ("jsd", "nrmse", "mae"):
        ranks += rankdata([r[key] for r in rows], method="min").astype(np.int64)
    out = [RankRow(n, float(r["jsd"]), float(r["nrmse"]), float(r["mae"]), int(k))
           for n, r, k in zip(names, rows, ranks)]
    out.sort(key=lambda r: (r.r_avg, r.name))
    return RankTable(tuple(out), flops_estimates)


def performance_density(m: float, flops: float) -> float:
    """1 / (m * log10(FLOPs))."""
    if not m > 0:
        raise ValueError("performance density needs m > 0")
    if not flops > 10:
        raise ValueError("performance density needs FLOPs > 10")
    return 1.0 / (m * math.log10(flops))
