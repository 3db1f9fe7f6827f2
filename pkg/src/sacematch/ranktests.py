"""Randomisation tests of the sharp null of no effect among always-survivors."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.stats import norm, rankdata

from .data import Dataset
from .matching import MatchedSample

EXACT_MAX_NONZERO = 20
EXACT_MAX_ARRANGEMENTS = 100_000


@dataclass(frozen=True)
class TestReport:
    test: str
    statistic: float
    p_value: float
    method: str
    alternative: str = "two-sided"
    n_perm: Optional[int] = None
    seed: Optional[int] = None
    n: int = 0

    __test__ = False  # keep pytest from collecting this class

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_row(self) -> dict:
        return {"test": self.test, "statistic": self.statistic, "p_value": self.p_value, "method": self.method}


def _signed_rank_null(ranks: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exact null distribution of the positive-rank sum under random signs.

    Ranks may be half-integers (ties), so the DP runs on doubled ranks.
    Returns support values (original scale) and probabilities.
    """
    r2 = np.rint(2 * ranks).astype(int)
    dist = np.zeros(r2.sum() + 1)
    dist[0] = 1.0
    for r in r2:
        shifted = np.zeros_like(dist)
        shifted[r:] = dist[:-r] if r > 0 else dist
        dist = 0.5 * (dist + shifted)
    support = np.arange(len(dist)) / 2.0
    return support, dist


def _tail_p(support, prob, obs, alternative):
    eps = 1e-9
    upper = prob[support >= obs - eps].sum()
    lower = prob[support <= obs + eps].sum()
    if alternative == "greater":
        return float(min(1.0, upper))
    if alternative == "less":
        return float(min(1.0, lower))
    return float(min(1.0, 2 * min(upper, lower)))


def wilcoxon_signed_rank(y_treated, y_untreated=None, alternative: str = "two-sided") -> TestReport:
    """Wilcoxon signed-rank test on paired differences ``y_treated - y_untreated``.

    Zero differences are dropped and tied magnitudes get average ranks. The
    null distribution is exact for up to 20 nonzero differences and normal
    (tie-corrected variance) beyond that. The statistic is the sum of ranks
    of positive differences.
    """
    if alternative not in ("two-sided", "greater", "less"):
        raise ValueError("alternative must be 'two-sided', 'greater' or 'less'")
    if y_untreated is None:
        pairs = np.asarray(y_treated, dtype=float)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ValueError("pairs must be an (n, 2) array of (treated, untreated)")
        diff = pairs[:, 0] - pairs[:, 1]
    else:
        diff = np.asarray(y_treated, dtype=float) - np.asarray(y_untreated, dtype=float)
    if diff.size == 0:
        raise ValueError("no pairs")
    nz = diff[diff != 0]
    if nz.size == 0:
        return TestReport("wilcoxon_signed_rank", 0.0, 1.0, "exact", alternative, n=int(diff.size))
    ranks = rankdata(np.abs(nz))
    w = float(ranks[nz > 0].sum())
    if nz.size <= EXACT_MAX_NONZERO:
        support, prob = _signed_rank_null(ranks)
        p = _tail_p(support, prob, w, alternative)
        method = "exact"
    else:
        mean = ranks.sum() / 2.0
        sd = np.sqrt(np.sum(ranks ** 2) / 4.0)
        z = (w - mean) / sd
        p = {"greater": norm.sf(z), "less": norm.cdf(z), "two-sided": 2 * norm.sf(abs(z))}[alternative]
        p = float(min(1.0, p))
        method = "normal_approx"
    return TestReport("wilcoxon_signed_rank", w, p, method, alternative, n=int(diff.size))


def _group_structure(sample: MatchedSample, d: Dataset):
    """Per donor-centred group: row indices and treatment labels."""
    groups = []
    for donor in np.unique(sample.donor_rows):
        targets = sample.target_rows[sample.donor_rows == donor]
        rows = np.concatenate([[donor], targets])
        groups.append(rows)
    return groups


def aligned_rank(
    sample: MatchedSample,
    d: Dataset,
    n_perm: int = 10_000,
    seed: Optional[int] = 0,
) -> TestReport:
    """Aligned-rank test for a matching with replacement.

    Each donor and the targets matched to it form a group; outcomes are
    centred at the group mean, ranked jointly, and the statistic is the sum
    of treated ranks. Its null distribution permutes treatment labels within
    groups: exactly when there are at most 1e5 arrangements, otherwise by
    ``n_perm`` seeded Monte Carlo draws. The p-value is two-sided about the
    null mean.
    """
    if not sample.with_replacement:
        raise ValueError("aligned-rank test expects a matching with replacement")
    groups = _group_structure(sample, d)
    if any(len(g) < 2 for g in groups):
        raise ValueError("every group needs at least two units")
    rows = np.concatenate(groups)
    gid = np.concatenate([np.full(len(g), k) for k, g in enumerate(groups)])
    y = d.y[rows]
    means = np.bincount(gid, weights=y) / np.bincount(gid)
    aligned = y - means[gid]
    # Exact ties after alignment (e.g. rounding noise) are averaged.
    ranks = rankdata(np.round(aligned, 10))
    treated = d.a[rows] == 1

    # Each group has a single unit of one arm: permuting labels moves it.
    choices = []
    observed = 0.0
    for k in range(len(groups)):
        r = ranks[gid == k]
        t = treated[gid == k]
        if t.sum() == 1:
            choices.append(r)
        else:  # one untreated unit; treated ranks = total - its rank
            choices.append(r.sum() - r)
        observed += r[t].sum()
    center = float(sum(c.mean() for c in choices))
    obs_dev = abs(observed - center)
    sizes = np.array([len(c) for c in choices], dtype=float)
    n_arr = float(np.prod(sizes))
    if n_arr <= EXACT_MAX_ARRANGEMENTS:
        # Exact: convolve the per-group uniform distributions on doubled ranks.
        support = {0: 1.0}
        for c in choices:
            nxt: dict = {}
            for v, pv in support.items():
                for x in np.rint(2 * c).astype(int):
                    nxt[v + x] = nxt.get(v + x, 0.0) + pv / len(c)
            support = nxt
        vals = np.array(list(support.keys())) / 2.0
        prob = np.array(list(support.values()))
        p = float(prob[np.abs(vals - center) >= obs_dev - 1e-9].sum())
        return TestReport("aligned_rank", float(observed), min(1.0, p), "exact", n=len(rows))
    rng = np.random.default_rng(seed)
    width = int(sizes.max())
    table = np.zeros((len(choices), width))
    for k, c in enumerate(choices):
        table[k, : len(c)] = c
    draws = np.floor(rng.random((n_perm, len(choices))) * sizes).astype(int)
    stats = table[np.arange(len(choices)), draws].sum(axis=1)
    hits = np.sum(np.abs(stats - center) >= obs_dev - 1e-9)
    p = float((hits + 1) / (n_perm + 1))
    return TestReport("aligned_rank", float(observed), min(1.0, p), "permutation", n_perm=n_perm, seed=seed, n=len(rows))
