"""Wilcoxon signed-rank test for matched pairs and restart summaries.

Conventions: zero differences are dropped, tied |d| get average ranks, the
p-value is exact for up to ``EXACT_MAX_N`` non-zero pairs and otherwise uses
the normal approximation with tie-corrected variance and a 0.5 continuity
correction. The alternative is two-sided.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import norm, rankdata

from . import kernels
from .errors import DegenerateInputError

EXACT_MAX_N = 25


@dataclass(frozen=True)
class PairedSample:
    run_id: int
    score_a: float
    score_b: float


@dataclass(frozen=True)
class TestResult:
    n_used: int
    W: float
    p_two_sided: float
    method: str

    __test__ = False  # not a pytest class


@dataclass(frozen=True)
class SummaryStats:
    mean: float
    std: float
    min: float
    max: float
    n: int


def _differences(pairs):
    d = []
    for p in pairs:
        if isinstance(p, PairedSample):
            d.append(p.score_b - p.score_a)
        else:
            d.append(float(p))
    return np.asarray(d, dtype=np.float64)


def exact_p_value(doubled_ranks, w_plus_doubled):
    """Two-sided exact p from the null distribution of the doubled W+."""
    counts = kernels.signed_rank_counts(doubled_ranks)
    total = float(counts.sum())
    upper = counts[w_plus_doubled:].sum() / total
    lower = counts[:w_plus_doubled + 1].sum() / total
    return float(min(1.0, 2.0 * min(upper, lower)))


def wilcoxon_signed_rank(pairs):
    """Test on ``pairs``: :class:`PairedSample` items (d = B - A) or raw differences."""
    d = _differences(pairs)
    if d.size == 0:
        raise DegenerateInputError("no pairs given")
    d = d[d != 0.0]
    n = int(d.size)
    if n == 0:
        raise DegenerateInputError("all differences are zero; signed-rank test undefined")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if n <= EXACT_MAX_N:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        p = exact_p_value(doubled, int(round(2.0 * w_plus)))
        return TestResult(n, w_plus, p, "exact")

    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(np.abs(d), return_counts=True)
    tie_term = float(np.sum(tie_sizes ** 3 - tie_sizes)) / 48.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - tie_term
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(var)
    p = min(1.0, 2.0 * float(norm.sf(z)))
    return TestResult(n, w_plus, p, "normal_approx")


def summarize(scores):
    x = np.asarray(list(scores), dtype=np.float64)
    if x.size == 0:
        raise DegenerateInputError("cannot summarize an empty score list")
    std = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
    mean = float(x.mean())
    # keep the min <= mean <= max invariant under rounding of the mean
    mean = min(max(mean, float(x.min())), float(x.max()))
    return SummaryStats(mean, std, float(x.min()), float(x.max()), int(x.size))
