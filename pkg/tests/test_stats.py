import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stilt_bench.errors import DegenerateInputError
from stilt_bench.stats import PairedSample, summarize, wilcoxon_signed_rank


def enumeration_p(d):
    """Two-sided p by walking all 2^n sign vectors over average ranks."""
    d = [v for v in d if v != 0]
    a = sorted(abs(v) for v in d)
    ranks = {}
    i = 0
    while i < len(a):
        j = i
        while j + 1 < len(a) and a[j + 1] == a[i]:
            j += 1
        ranks[a[i]] = (i + j + 2) / 2
        i = j + 1
    r = [ranks[abs(v)] for v in d]
    observed = sum(rv for rv, v in zip(r, d) if v > 0)
    ge = le = 0
    total = 0
    for signs in itertools.product((0, 1), repeat=len(r)):
        w = sum(rv for rv, s in zip(r, signs) if s)
        total += 1
        ge += w >= observed - 1e-9
        le += w <= observed + 1e-9
    return min(1.0, 2 * min(ge, le) / total)


def test_three_increasing_differences():
    result = wilcoxon_signed_rank([1, 2, 3])
    assert result.W == 6 and result.p_two_sided == pytest.approx(0.25, abs=1e-15)
    assert result.method == "exact"


def test_symmetric_pair():
    result = wilcoxon_signed_rank([1, -1])
    assert result.W == 1.5 and result.p_two_sided == 1.0


def test_all_zero_is_degenerate():
    with pytest.raises(DegenerateInputError):
        wilcoxon_signed_rank([0, 0, 0])


def test_paired_samples_use_b_minus_a():
    pairs = [PairedSample(i, 0.5, 0.5 + 0.01 * (i + 1)) for i in range(5)]
    result = wilcoxon_signed_rank(pairs)
    assert result.W == 15 and result.p_two_sided == pytest.approx(2 / 32)


def test_zeros_are_dropped():
    assert wilcoxon_signed_rank([0, 1, 2, 3]).n_used == 3


def test_matches_enumeration_with_ties():
    rng = np.random.default_rng(3)
    for _ in range(60):
        n = int(rng.integers(1, 11))
        d = rng.integers(-4, 5, n).astype(float)
        if not d.any():
            continue
        assert wilcoxon_signed_rank(d).p_two_sided == pytest.approx(enumeration_p(d), abs=1e-12)


def test_large_n_uses_normal_approximation():
    d = np.random.default_rng(0).normal(0.1, 1.0, 40)
    result = wilcoxon_signed_rank(d)
    assert result.method == "normal_approx" and 0 <= result.p_two_sided <= 1


def test_exact_and_normal_agree_at_25():
    import stilt_bench.stats as stats

    rng = np.random.default_rng(9)
    for _ in range(20):
        d = rng.normal(0.2, 1.0, 25)
        exact = wilcoxon_signed_rank(d)
        # approximate path on the same data via a lowered threshold
        old = stats.EXACT_MAX_N
        stats.EXACT_MAX_N = 0
        try:
            approx = wilcoxon_signed_rank(d)
        finally:
            stats.EXACT_MAX_N = old
        assert approx.method == "normal_approx"
        assert abs(exact.p_two_sided - approx.p_two_sided) < 0.02


@given(st.lists(st.integers(-6, 6).filter(bool), min_size=1, max_size=10))
def test_order_and_swap_invariance(values):
    d = np.array(values, dtype=float)
    p = wilcoxon_signed_rank(d).p_two_sided
    assert wilcoxon_signed_rank(d[::-1]).p_two_sided == pytest.approx(p, abs=1e-15)
    assert wilcoxon_signed_rank(-d).p_two_sided == pytest.approx(p, abs=1e-15)
    assert 0.0 <= p <= 1.0


def test_summaries():
    s = summarize([0.5])
    assert (s.mean, s.std, s.n) == (0.5, 0.0, 1)
    s = summarize([0.4, 0.6])
    assert s.mean == pytest.approx(0.5) and s.std == pytest.approx(math.sqrt(0.02))
    assert summarize([0.3] * 7).std == 0.0
    with pytest.raises(DegenerateInputError):
        summarize([])


@given(st.lists(st.floats(0, 1), min_size=1, max_size=20))
def test_summary_bounds(scores):
    s = summarize(scores)
    assert s.min <= s.mean <= s.max
