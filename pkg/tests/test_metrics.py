import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdfmkit import metrics
from pdfmkit.errors import MetricError


def ref_r2(y, p):
    m = math.fsum(y) / len(y)
    return 1 - math.fsum((a - b) ** 2 for a, b in zip(y, p)) / math.fsum((a - m) ** 2 for a in y)


def ref_pearson(y, p):
    my, mp = math.fsum(y) / len(y), math.fsum(p) / len(p)
    cov = math.fsum((a - my) * (b - mp) for a, b in zip(y, p))
    return cov / math.sqrt(math.fsum((a - my) ** 2 for a in y) * math.fsum((b - mp) ** 2 for b in p))


def ref_intra(y, p, c, min_size=3):
    groups = {}
    for yi, pi, ci in zip(y, p, c):
        groups.setdefault(ci, []).append((yi, pi))
    rs = []
    for rows in groups.values():
        ys, ps = [r[0] for r in rows], [r[1] for r in rows]
        if len(rows) >= min_size and max(ys) > min(ys) and max(ps) > min(ps):
            rs.append(ref_pearson(ys, ps))
    return math.fsum(rs) / len(rs)


def ref_mape(y, p):
    return math.fsum(abs((a - b) / a) for a, b in zip(y, p)) / len(y)


class TestExamples:
    def test_r2(self):
        assert metrics.r_squared([1, 2, 3], [1, 2, 3]) == 1.0
        assert metrics.r_squared([1, 2, 3], [2, 2, 2]) == 0.0
        assert metrics.r_squared([1, 2, 3], [3, 2, 1]) == -3.0
        assert metrics.r_squared([1, 2, 3], [1, 2, 4]) == 0.5
        with pytest.raises(MetricError):
            metrics.r_squared([2, 2], [1, 3])

    def test_pearson(self):
        assert metrics.pearson_r([1, 2, 3], [2, 4, 6]) == pytest.approx(1.0)
        assert metrics.pearson_r([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)
        assert metrics.pearson_r([0, 1, 2], [0, 2, 3]) == pytest.approx(3 / math.sqrt(2 * 42 / 9), abs=1e-12)
        with pytest.raises(MetricError):
            metrics.pearson_r([1, 2, 3], [5, 5, 5])

    def test_mape(self):
        assert metrics.mape([100, 200], [110, 180]) == pytest.approx(0.1)
        assert metrics.mape([100], [110]) == pytest.approx(0.1)
        with pytest.raises(MetricError):
            metrics.mape([0.0, 1.0], [0.0, 1.0])

    def test_length_mismatch(self):
        with pytest.raises(MetricError):
            metrics.r_squared([1, 2, 3], [1, 2])

    def test_intra_county_skips(self):
        y = [1, 2, 3, 5, 5, 5, 1, 2]
        p = [1, 2, 4, 1, 2, 3, 9, 9]
        c = ["a", "a", "a", "b", "b", "b", "c", "c"]
        res = metrics.intra_county_pearson(y, p, c)
        assert res.n_counties == 1 and res.n_skipped == 2
        assert res.per_county[0][0] == "a"
        with pytest.raises(MetricError):
            metrics.intra_county_pearson([1, 2], [1, 2], ["a", "a"])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31), st.integers(3, 60))
def test_metrics_match_reference(seed, n):
    rng = np.random.default_rng(seed)
    y = rng.normal(5, 2, n)
    p = y + rng.normal(0, rng.uniform(0.1, 5), n)
    assert metrics.r_squared(y, p) == pytest.approx(ref_r2(y, p), abs=1e-12)
    assert metrics.pearson_r(y, p) == pytest.approx(ref_pearson(y, p), abs=1e-12)
    assert metrics.mape(y, p) == pytest.approx(ref_mape(y, p), abs=1e-12)
    c = rng.integers(0, 4, n).astype(str)
    try:
        got = metrics.intra_county_pearson(y, p, c).value
    except MetricError:
        return
    assert got == pytest.approx(ref_intra(y, p, c), abs=1e-12)


class TestPairedTTest:
    def test_identical(self):
        r = metrics.paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert r.p == 1.0 and not r.significant

    def test_constant_shift(self):
        r = metrics.paired_t_test([2.0, 3.0, 4.0], [1.0, 2.0, 3.0])
        assert r.significant and r.p == 0.0

    def test_bonferroni_threshold(self):
        r = metrics.paired_t_test([1.0, 2.0, 3.5], [1.1, 1.8, 3.0], m_comparisons=5)
        assert r.threshold == pytest.approx(0.01)

    def test_matches_hand_formula(self):
        a = np.array([0.3, 0.5, 0.2, 0.9, 0.4])
        b = np.array([0.2, 0.6, 0.1, 0.5, 0.3])
        d = a - b
        t = d.mean() / (d.std(ddof=1) / math.sqrt(5))
        assert metrics.paired_t_test(a, b).t == pytest.approx(t, rel=1e-12)

    @pytest.mark.parametrize("shift", [0.0, 0.15, 0.3])
    def test_p_value_against_simulated_null(self, shift):
        # null distribution of the statistic simulated from Gaussian differences
        rng = np.random.default_rng(11)
        n = 30
        d = rng.normal(shift, 1.0, n)
        res = metrics.paired_t_test(d, np.zeros(n))
        sims = rng.normal(size=(400_000, n))
        t_null = sims.mean(1) / (sims.std(1, ddof=1) / math.sqrt(n))
        assert abs(np.mean(np.abs(t_null) >= abs(res.t)) - res.p) < 0.005


def exact_sign_flip_p(d):
    """Exact sign-flip permutation p-value of the studentized mean (2^n flips)."""
    n = len(d)
    t_obs = abs(d.mean() / (d.std(ddof=1) / math.sqrt(n)))
    codes = np.arange(2 ** n, dtype=np.int64)
    hits = 0
    for start in range(0, 2 ** n, 1 << 16):
        signs = 1 - 2 * ((codes[start:start + (1 << 16), None] >> np.arange(n)) & 1)
        x = signs * d
        t = x.mean(1) / (x.std(1, ddof=1) / math.sqrt(n))
        hits += int(np.sum(np.abs(t) >= t_obs - 1e-9))
    return hits / 2 ** n


@pytest.mark.parametrize("seed", [0, 2, 4])
def test_t_test_against_exact_permutation(seed):
    d = np.random.default_rng(seed).normal(0.4, 1.0, 20)
    a, b = d + 1.0, np.ones(20)
    res = metrics.paired_t_test(a, b)
    assert abs(res.p - exact_sign_flip_p(d)) < 0.005
    swapped = metrics.paired_t_test(b, a)
    assert swapped.t == pytest.approx(-res.t) and swapped.p == pytest.approx(res.p)


def test_intra_county_two_county_oracle():
    y = [1.0, 2.0, 4.0, 3.0, 1.0, 0.0, 2.0]
    p = [1.5, 2.0, 3.0, 2.0, 2.5, 0.5, 1.0]
    c = ["x", "x", "x", "y", "y", "y", "y"]
    expected = (ref_pearson(y[:3], p[:3]) + ref_pearson(y[3:], p[3:])) / 2
    assert metrics.intra_county_pearson(y, p, c).value == pytest.approx(expected, abs=1e-12)
    assert metrics.intra_county_pearson(y, y, c).value == pytest.approx(1.0)
