import itertools
import math

import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from scipy.stats import mannwhitneyu

from airtaper.stats import StatsError, bland_altman, pearson_r, wilcoxon_rank_sum


def test_smallest_example():
    r = wilcoxon_rank_sum([1, 2], [3, 4])
    assert r.method == "exact"
    assert r.u_statistic == 0
    assert r.p_two_sided == pytest.approx(1 / 3)


def test_identical_samples():
    r = wilcoxon_rank_sum([1, 2, 3], [1, 2, 3])
    assert r.p_two_sided == pytest.approx(1.0)


def test_three_vs_three_separated():
    # 2 of the 20 equally likely splits are as extreme
    assert wilcoxon_rank_sum([1, 2, 3], [4, 5, 6]).p_two_sided == pytest.approx(0.1)


def exhaustive_p(x, y):
    """Two-sided p by enumerating every relabelling of the pooled ranks."""
    m = len(x)
    pooled = np.concatenate([x, y])
    ranks = pooled.argsort().argsort() + 1
    u_obs = ranks[:m].sum() - m * (m + 1) / 2
    us = [sum(c) - m * (m + 1) / 2 for c in itertools.combinations(range(1, len(pooled) + 1), m)]
    us = np.array(us)
    lower = np.mean(us <= u_obs)
    upper = np.mean(us >= u_obs)
    return min(1.0, 2 * min(lower, upper))


def test_exact_against_enumeration(rng):
    for m in range(1, 7):
        for n in range(1, 7):
            for _ in range(3):
                v = rng.permutation(m + n).astype(float)
                x, y = v[:m], v[m:]
                assert wilcoxon_rank_sum(x, y).p_two_sided == pytest.approx(exhaustive_p(x, y), abs=1e-12)


def test_exact_matches_scipy(rng):
    for _ in range(40):
        m, n = rng.integers(2, 10, 2)
        x, y = rng.normal(size=m), rng.normal(0.5, size=n)
        ours = wilcoxon_rank_sum(x, y, method="exact")
        ref = mannwhitneyu(x, y, alternative="two-sided", method="exact")
        assert ours.u_statistic == ref.statistic
        assert ours.p_two_sided == pytest.approx(ref.pvalue, abs=1e-12)


def test_normal_matches_scipy_with_ties(rng):
    for _ in range(40):
        x = rng.integers(0, 6, 15).astype(float)
        y = rng.integers(1, 7, 12).astype(float)
        ours = wilcoxon_rank_sum(x, y)
        ref = mannwhitneyu(x, y, alternative="two-sided", method="asymptotic", use_continuity=True)
        assert ours.method == "normal_approx"
        assert ours.p_two_sided == pytest.approx(ref.pvalue, abs=1e-12)


def test_approximation_close_to_exact_at_eight(rng):
    for _ in range(20):
        x, y = rng.normal(size=8), rng.normal(0.7, size=8)
        e = wilcoxon_rank_sum(x, y, method="exact").p_two_sided
        a = wilcoxon_rank_sum(x, y, method="normal_approx").p_two_sided
        assert abs(e - a) <= 0.02


samples = st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=12)


@given(samples, samples)
def test_swapping_groups_keeps_p(x, y):
    a = wilcoxon_rank_sum(x, y)
    b = wilcoxon_rank_sum(y, x)
    assert a.p_two_sided == pytest.approx(b.p_two_sided, abs=1e-12)
    assert a.u_statistic + b.u_statistic == pytest.approx(len(x) * len(y))


@given(samples, samples)
def test_monotone_transform_keeps_p(x, y):
    f = lambda v: np.exp(np.asarray(v) / 500.0) * 3 + 1  # noqa: E731
    assume(len(set(f(x + y))) == len(set(x + y)))
    assert wilcoxon_rank_sum(f(x), f(y)).p_two_sided == pytest.approx(
        wilcoxon_rank_sum(x, y).p_two_sided, abs=1e-12)


def test_rank_sum_errors():
    with pytest.raises(StatsError):
        wilcoxon_rank_sum([], [1])
    with pytest.raises(StatsError):
        wilcoxon_rank_sum([1, 1], [1, 2], method="exact")
    with pytest.raises(StatsError):
        wilcoxon_rank_sum([1], [2], method="bootstrap")


def test_bland_altman_example():
    r = bland_altman([1, 2, 3, 4], [1.1, 1.9, 3.2, 3.8])
    d = np.array([-0.1, 0.1, -0.2, 0.2])
    assert r.mean_diff == pytest.approx(d.mean(), abs=1e-12)
    assert r.sd_diff == pytest.approx(d.std(ddof=1), abs=1e-12)
    assert r.limits[0] == pytest.approx(d.mean() - 1.96 * d.std(ddof=1), abs=1e-12)
    assert r.limits[1] == pytest.approx(d.mean() + 1.96 * d.std(ddof=1), abs=1e-12)


@given(st.lists(st.tuples(st.floats(-100, 100), st.floats(-100, 100)), min_size=2, max_size=30))
def test_bland_altman_closed_form(pairs):
    x, y = np.array(pairs).T
    r = bland_altman(x, y)
    n = len(x)
    md = sum(a - b for a, b in pairs) / n
    sd = math.sqrt(sum((a - b - md) ** 2 for a, b in pairs) / (n - 1))
    assert r.mean_diff == pytest.approx(md, abs=1e-9)
    assert r.sd_diff == pytest.approx(sd, abs=1e-9)


def test_bland_altman_errors():
    with pytest.raises(StatsError):
        bland_altman([1, 2], [1])
    with pytest.raises(StatsError):
        bland_altman([1], [1])


def test_pearson():
    x = np.arange(10.0)
    assert pearson_r(x, 3 * x + 1) == pytest.approx(1.0)
    assert pearson_r(x, -x) == pytest.approx(-1.0)
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=50), rng.normal(size=50)
    assert pearson_r(a, b) == pytest.approx(np.corrcoef(a, b)[0, 1], abs=1e-12)
    with pytest.raises(StatsError):
        pearson_r(x, np.ones(10))
    with pytest.raises(StatsError):
        pearson_r([1], [2])
