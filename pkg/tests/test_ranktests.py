import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import rankdata

import sacematch.ranktests as rt
from sacematch.matching import DistanceSpec, match
from sacematch.ranktests import aligned_rank, wilcoxon_signed_rank

from conftest import make_dataset

EIGHT_PAIRS = np.array([[3.1, 1.0], [2.2, 2.9], [5.0, 1.4], [0.3, 0.1], [4.4, 2.0], [1.0, 1.7], [2.8, 0.2], [6.0, 3.3]])
# Frozen from the 2^8 enumeration below.
EIGHT_PAIRS_P = 0.078125


def _enumerate_signed_rank(diff):
    nz = diff[diff != 0]
    ranks = rankdata(np.abs(nz))
    obs = ranks[nz > 0].sum()
    stats = np.array([ranks[np.array(signs) > 0].sum() for signs in itertools.product([-1, 1], repeat=len(nz))])
    upper, lower = np.mean(stats >= obs - 1e-9), np.mean(stats <= obs + 1e-9)
    return min(1.0, 2 * min(upper, lower))


def test_all_zero_differences():
    r = wilcoxon_signed_rank(np.ones(6), np.ones(6))
    assert r.p_value == 1.0


def test_five_positive_one_sided():
    r = wilcoxon_signed_rank(np.arange(1.0, 6.0), np.zeros(5), alternative="greater")
    assert r.p_value == pytest.approx(1 / 32)
    assert r.method == "exact"


def test_eight_pairs_matches_enumeration():
    r = wilcoxon_signed_rank(EIGHT_PAIRS)
    assert r.p_value == pytest.approx(EIGHT_PAIRS_P)
    assert _enumerate_signed_rank(EIGHT_PAIRS[:, 0] - EIGHT_PAIRS[:, 1]) == pytest.approx(EIGHT_PAIRS_P)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(-4, 4), min_size=1, max_size=10))
def test_exact_matches_enumeration_with_ties(diffs):
    diff = np.array(diffs, dtype=float)
    r = wilcoxon_signed_rank(diff, np.zeros_like(diff))
    expected = 1.0 if not np.any(diff) else _enumerate_signed_rank(diff)
    assert r.p_value == pytest.approx(expected)
    assert 0 <= r.p_value <= 1


def test_normal_approximation_for_many_pairs():
    rng = np.random.default_rng(0)
    r = wilcoxon_signed_rank(rng.normal(size=40), rng.normal(size=40))
    assert r.method == "normal_approx" and 0 <= r.p_value <= 1


def test_wilcoxon_bad_input():
    with pytest.raises(ValueError):
        wilcoxon_signed_rank(np.ones(3))
    with pytest.raises(ValueError):
        wilcoxon_signed_rank(np.ones(2), np.ones(2), alternative="both")


def _three_pair_sample(y):
    d = make_dataset([0.0, 5.0, 10.0, 0.1, 5.1, 10.1], [0, 0, 0, 1, 1, 1], [1] * 6, y=y)
    return match(d, DistanceSpec("mahalanobis"), with_replacement=True), d


def test_aligned_all_identical():
    s, d = _three_pair_sample(np.full(6, 2.0))
    assert aligned_rank(s, d).p_value == 1.0


def _enumerate_aligned(s, d):
    """Swap labels within each pair; the aligned values and ranks stay fixed."""
    y = d.y
    groups = [(t, dn) for t, dn in zip(s.target_rows, s.donor_rows)]
    aligned = np.concatenate([[y[t] - (y[t] + y[dn]) / 2, y[dn] - (y[t] + y[dn]) / 2] for t, dn in groups])
    ranks = rankdata(aligned).reshape(-1, 2)  # columns: target, donor
    obs = ranks[:, 1].sum()
    stats = [sum(ranks[g, sw] for g, sw in enumerate(swaps)) for swaps in itertools.product([0, 1], repeat=len(groups))]
    stats = np.array(stats)
    center = stats.mean()
    return float(np.mean(np.abs(stats - center) >= abs(obs - center) - 1e-9))


def test_aligned_exact_and_monte_carlo(monkeypatch):
    s, d = _three_pair_sample(np.array([0.0, 1.0, 0.5, 2.0, 1.3, 3.0]))
    exact = _enumerate_aligned(s, d)
    r = aligned_rank(s, d)
    assert r.method == "exact" and r.p_value == pytest.approx(exact)
    monkeypatch.setattr(rt, "EXACT_MAX_ARRANGEMENTS", 0)
    mc = aligned_rank(s, d, n_perm=4000, seed=3)
    assert mc.method == "permutation"
    se = np.sqrt(exact * (1 - exact) / 4000)
    assert abs(mc.p_value - exact) <= 3 * se + 1 / 4001


def test_aligned_seeded(nsw, nsw_sample):
    a = aligned_rank(nsw_sample, nsw, n_perm=2000, seed=5)
    b = aligned_rank(nsw_sample, nsw, n_perm=2000, seed=5)
    assert a == b and 0 <= a.p_value <= 1


def test_aligned_requires_replacement(nsw, nsw_spec):
    s = match(nsw, nsw_spec, with_replacement=False)
    with pytest.raises(ValueError, match="with replacement"):
        aligned_rank(s, nsw)
