"""Benchmark metrics and the paired significance test."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import MetricError


def _pair(y, yhat, min_len=1):
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    yhat = np.asarray(yhat, dtype=np.float64).reshape(-1)
    if y.shape != yhat.shape:
        raise MetricError(f"length mismatch: {len(y)} vs {len(yhat)}")
    if len(y) < min_len:
        raise MetricError(f"need at least {min_len} values, got {len(y)}")
    return y, yhat


def r_squared(y, yhat):
    """Coefficient of determination; unbounded below, never clamped."""
    y, yhat = _pair(y, yhat, 2)
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise MetricError("R^2 is undefined for a constant target")
    return float(1.0 - np.sum((y - yhat) ** 2) / ss_tot)


def pearson_r(y, yhat):
    y, yhat = _pair(y, yhat, 2)
    dy = y - y.mean()
    dp = yhat - yhat.mean()
    denom = np.sqrt(np.sum(dy * dy) * np.sum(dp * dp))
    if denom == 0:
        raise MetricError("Pearson r is undefined for a constant input")
    return float(np.clip(np.sum(dy * dp) / denom, -1.0, 1.0))


@dataclass(frozen=True)
class IntraCountyResult:
    value: float
    n_counties: int
    n_skipped: int
    per_county: tuple = ()


def intra_county_pearson(y, yhat, counties, min_size=3):
    """Mean of per-county Pearson r over counties with at least ``min_size``
    test regions and a nonconstant target (and prediction)."""
    y, yhat = _pair(y, yhat, 1)
    counties = np.asarray(counties)
    if len(counties) != len(y):
        raise MetricError("county labels are not aligned with values")
    rs, names, skipped = [], [], 0
    for c in sorted(set(counties.tolist())):
        m = counties == c
        if m.sum() < min_size or np.ptp(y[m]) == 0 or np.ptp(yhat[m]) == 0:
            skipped += 1
            continue
        rs.append(pearson_r(y[m], yhat[m]))
        names.append(c)
    if not rs:
        raise MetricError("no county qualifies for intra-county Pearson r")
    return IntraCountyResult(float(np.mean(rs)), len(rs), skipped, tuple(zip(names, rs)))


def absolute_percentage_errors(y, yhat, floor=1e-9):
    y, yhat = _pair(y, yhat, 1)
    if np.any(np.abs(y) < floor):
        raise MetricError("MAPE is undefined for actual values near zero")
    return np.abs((y - yhat) / y)


def mape(y, yhat):
    return float(np.mean(absolute_percentage_errors(y, yhat)))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    significant: bool
    threshold: float
    n: int
    mean_difference: float
    note: str = ""

    def to_dict(self):
        return {"t": self.t, "p": self.p, "significant": self.significant,
                "threshold": self.threshold, "n": self.n,
                "mean_difference": self.mean_difference, "note": self.note}


def paired_t_test(errors_a, errors_b, m_comparisons=1, alpha=0.05):
    """Two-sided paired t-test with a Bonferroni threshold ``alpha / m``."""
    a, b = _pair(errors_a, errors_b, 2)
    if m_comparisons < 1:
        raise MetricError("number of comparisons must be at least 1")
    threshold = alpha / m_comparisons
    d = a - b
    n = len(d)
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0:
        if mean == 0:
            return TTestResult(0.0, 1.0, False, threshold, n, 0.0, "identical errors")
        t = float(np.copysign(np.inf, mean))
        return TTestResult(t, 0.0, True, threshold, n, mean, "zero-variance nonzero difference")
    t = mean / (sd / np.sqrt(n))
    p = float(2.0 * stats.t.sf(abs(t), df=n - 1))
    return TTestResult(float(t), p, p < threshold, threshold, n, mean)
