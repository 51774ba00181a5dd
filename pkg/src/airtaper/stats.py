"""Rank-sum testing, Bland-Altman agreement and correlation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

EXACT_MAX_TOTAL = 20


class StatsError(ValueError):
    pass


@dataclass(frozen=True)
class RankSumResult:
    u_statistic: float
    p_two_sided: float
    method: str


@dataclass(frozen=True)
class BlandAltmanResult:
    mean_diff: float
    sd_diff: float
    limits: tuple


def _rank_sum_counts(m: int, n: int) -> np.ndarray:
    """Number of m-subsets of ranks 1..m+n with each possible U value."""
    total = m + n
    max_sum = sum(range(total - m + 1, total + 1))
    # ways[k][s]: subsets of size k with rank sum s
    ways = np.zeros((m + 1, max_sum + 1), dtype=object)
    ways[0, 0] = 1
    for r in range(1, total + 1):
        for k in range(min(r, m), 0, -1):
            ways[k, r:] = ways[k, r:] + ways[k - 1, :max_sum + 1 - r]
    offset = m * (m + 1) // 2
    return ways[m, offset:]


def wilcoxon_rank_sum(x, y, method: str = "auto") -> RankSumResult:
    """Two-sided Wilcoxon rank-sum (Mann-Whitney) test.

    ``u_statistic`` is the U of ``x``. Small untied samples use the exact
    permutation distribution with the smaller tail doubled; otherwise a
    normal approximation with tie and continuity corrections is used.
    """
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    m, n = x.size, y.size
    if m == 0 or n == 0:
        raise StatsError("both samples need at least one observation")
    ranks = rankdata(np.concatenate([x, y]))
    u = float(ranks[:m].sum() - m * (m + 1) / 2.0)
    _, tie_counts = np.unique(ranks, return_counts=True)
    tied = bool(np.any(tie_counts > 1))
    if method == "auto":
        method = "exact" if m + n <= EXACT_MAX_TOTAL and not tied else "normal_approx"
    if method == "exact":
        if tied:
            raise StatsError("exact distribution assumes no ties")
        counts = _rank_sum_counts(m, n)
        total = sum(counts)
        k = int(round(u))
        lower = sum(counts[:k + 1]) / total
        upper = sum(counts[k:]) / total
        return RankSumResult(u, float(min(1.0, 2.0 * min(lower, upper))), "exact")
    if method != "normal_approx":
        raise StatsError(f"unknown method {method!r}")
    big_n = m + n
    tie_term = float(np.sum(tie_counts ** 3 - tie_counts)) / (big_n * (big_n - 1)) if big_n > 1 else 0.0
    var = m * n / 12.0 * ((big_n + 1) - tie_term)
    if var <= 0:
        return RankSumResult(u, 1.0, "normal_approx")
    z = max(abs(u - m * n / 2.0) - 0.5, 0.0) / math.sqrt(var)
    return RankSumResult(u, float(min(1.0, math.erfc(z / math.sqrt(2.0)))), "normal_approx")


def bland_altman(x, y) -> BlandAltmanResult:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise StatsError("paired samples differ in length")
    if x.size < 2:
        raise StatsError("need at least two pairs")
    d = x - y
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    return BlandAltmanResult(mean, sd, (mean - 1.96 * sd, mean + 1.96 * sd))


def pearson_r(x, y) -> float:
    x = np.asarray(x, dtype=float).ravel()
    y = np.asarray(y, dtype=float).ravel()
    if x.shape != y.shape:
        raise StatsError("samples differ in length")
    if x.size < 2:
        raise StatsError("need at least two observations")
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise StatsError("correlation undefined for a constant sample")
    return float(np.clip((dx @ dy) / math.sqrt(sxx * syy), -1.0, 1.0))
