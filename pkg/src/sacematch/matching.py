"""Distances, survivor matching and covariate balance."""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import cdist

from .data import DataError, Dataset, UnitRecord
from .principal_score import PrincipalScoreModel

KINDS = ("exact", "mahalanobis", "pi_tilde_abs_diff", "mahalanobis_with_caliper")


@dataclass(frozen=True)
class DistanceSpec:
    """How to measure dissimilarity between a target and a potential donor.

    ``caliper`` is in absolute units of the always-survivor share ``pi1_as``
    unless ``caliper_units="sd"``, in which case it multiplies the SD of
    ``pi1_as`` over all survivors. ``cov`` and ``x0_columns`` are filled in
    by :meth:`bind`; pass ``cov`` explicitly to override the pooled-survivor
    covariance.
    """

    kind: str = "mahalanobis"
    columns: Union[str, tuple[str, ...]] = "distance"
    caliper: Optional[float] = None
    caliper_units: str = "absolute"
    score_model: Optional[PrincipalScoreModel] = None
    cov: Optional[np.ndarray] = None
    x0_columns: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distance kind {self.kind!r}; expected one of {KINDS}")
        if self.caliper_units not in ("absolute", "sd"):
            raise ValueError("caliper_units must be 'absolute' or 'sd'")
        if self.caliper is not None and self.caliper <= 0:
            raise ValueError("caliper must be positive")
        if self.kind == "mahalanobis_with_caliper" and (self.score_model is None or self.caliper is None):
            raise ValueError("mahalanobis_with_caliper requires a score model and a caliper")
        if self.kind == "pi_tilde_abs_diff" and self.score_model is None:
            raise ValueError("pi_tilde_abs_diff requires a score model")
        if not isinstance(self.columns, str):
            object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def uses_score(self) -> bool:
        return self.kind in ("pi_tilde_abs_diff", "mahalanobis_with_caliper")

    @property
    def uses_covariates(self) -> bool:
        return self.kind in ("exact", "mahalanobis", "mahalanobis_with_caliper")

    @property
    def bound(self) -> bool:
        return self.x0_columns is not None and not isinstance(self.columns, str) and (
            self.kind not in ("mahalanobis", "mahalanobis_with_caliper") or self.cov is not None
        ) and (self.caliper is None or self.caliper_units == "absolute")

    def bind(self, d: Dataset) -> "DistanceSpec":
        """Resolve roles, the pooled-survivor covariance and an absolute caliper."""
        cols = tuple(d.meta.role(self.columns)) if isinstance(self.columns, str) else self.columns
        survivors = d.s == 1
        cov = self.cov
        if self.kind in ("mahalanobis", "mahalanobis_with_caliper") and cov is None:
            Xs = d.x(list(cols))[survivors]
            if len(Xs) < 2:
                raise DataError("need at least two survivors to estimate the distance covariance")
            cov = np.atleast_2d(np.cov(Xs, rowvar=False))
        caliper, units = self.caliper, self.caliper_units
        if caliper is not None and units == "sd":
            pi1 = pi1_as(self.score_model, d)[survivors]
            caliper = float(caliper * np.std(pi1, ddof=1))
            units = "absolute"
        x0 = tuple(c for c in d.meta.columns if c not in d.meta.roles.get("post_treatment", []))
        return dataclasses.replace(self, columns=cols, cov=cov, caliper=caliper, caliper_units=units, x0_columns=x0)

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "columns": self.columns if isinstance(self.columns, str) else list(self.columns),
            "caliper": self.caliper,
            "caliper_units": self.caliper_units,
            "score_model": None if self.score_model is None else self.score_model.variant,
        }


def pi1_as(model: PrincipalScoreModel, d: Dataset) -> np.ndarray:
    """``pi1_as`` for every unit of ``d``."""
    return np.asarray(model.pi_tilde(d.x(list(model.columns))).pi1_as, dtype=float)


def _whitener(cov: np.ndarray) -> np.ndarray:
    """Matrix W with W @ W.T equal to the (pseudo-)inverse of ``cov``."""
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if not np.allclose(cov, cov.T):
        raise ValueError("covariance matrix must be symmetric")
    vals, vecs = np.linalg.eigh(cov)
    tol = vals.max() * len(vals) * np.finfo(float).eps
    if np.any(vals <= tol):
        warnings.warn("distance covariance is singular; using the pseudo-inverse", RuntimeWarning, stacklevel=3)
    inv_sqrt = np.where(vals > tol, 1.0 / np.sqrt(np.where(vals > tol, vals, 1.0)), 0.0)
    return vecs * inv_sqrt


def mahalanobis_distance(xi, xj, cov) -> float:
    """Squared Mahalanobis quadratic form ``(xi - xj)' cov^-1 (xi - xj)``."""
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    xj = np.atleast_1d(np.asarray(xj, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if xi.shape != xj.shape or cov.shape != (xi.size, xi.size):
        raise ValueError(f"dimension mismatch: {xi.shape}, {xj.shape}, {cov.shape}")
    z = (xi - xj) @ _whitener(cov)
    return float(max(0.0, z @ z))


def _score_of(spec: DistanceSpec, unit: UnitRecord) -> float:
    idx = [spec.x0_columns.index(c) for c in spec.score_model.columns]
    return float(spec.score_model.pi_tilde(unit.x0[idx]).pi1_as[0])


def distance(spec: DistanceSpec, unit_i: UnitRecord, unit_j: UnitRecord) -> float:
    """Distance between two units under a spec bound to their dataset."""
    if not spec.bound:
        raise ValueError("distance spec is not bound; call spec.bind(dataset) first")
    if spec.uses_score and spec.score_model is None:
        raise ValueError("score model required")
    idx = [spec.x0_columns.index(c) for c in spec.columns]
    xi, xj = unit_i.x0[idx], unit_j.x0[idx]
    if spec.kind == "exact":
        return 0.0 if np.array_equal(xi, xj) else np.inf
    if spec.kind == "pi_tilde_abs_diff":
        return abs(_score_of(spec, unit_i) - _score_of(spec, unit_j))
    if spec.kind == "mahalanobis_with_caliper":
        if abs(_score_of(spec, unit_i) - _score_of(spec, unit_j)) > spec.caliper:
            return np.inf
    return mahalanobis_distance(xi, xj, spec.cov)


def distance_matrix(spec: DistanceSpec, d: Dataset, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Distances between units ``rows`` and ``cols`` of ``d`` (row indices)."""
    if not spec.bound:
        spec = spec.bind(d)
    X = d.x(list(spec.columns))
    if spec.kind == "exact":
        same = cdist(X[rows], X[cols], "cityblock") == 0
        return np.where(same, 0.0, np.inf)
    if spec.uses_score:
        p = pi1_as(spec.score_model, d)
        gap = np.abs(p[rows][:, None] - p[cols][None, :])
        if spec.kind == "pi_tilde_abs_diff":
            return gap
    W = _whitener(spec.cov)
    D = cdist(X[rows] @ W, X[cols] @ W, "sqeuclidean")
    if spec.kind == "mahalanobis_with_caliper":
        D[gap > spec.caliper] = np.inf
    return D


@dataclass(frozen=True)
class MatchedSample:
    """Targets from one survivor arm paired with donors from the other.

    Positions (``target_rows``, ``donor_rows``) index the source dataset;
    ``target_ids``/``donor_ids`` are the unit ids.
    """

    target_arm: int
    target_rows: np.ndarray
    donor_rows: np.ndarray
    target_ids: np.ndarray
    donor_ids: np.ndarray
    distances: np.ndarray
    unmatched_targets: np.ndarray
    with_replacement: bool
    algorithm: str = "greedy"
    spec: Optional[DistanceSpec] = None

    def __post_init__(self):
        if self.target_arm not in (0, 1):
            raise ValueError("target_arm must be 0 or 1")
        if not self.with_replacement and len(np.unique(self.donor_rows)) != len(self.donor_rows):
            raise ValueError("donor reused in a matching without replacement")

    @property
    def n_pairs(self) -> int:
        return len(self.target_rows)

    @property
    def donor_arm(self) -> int:
        return 1 - self.target_arm

    @property
    def K(self) -> dict:
        ids, counts = np.unique(self.donor_ids, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))

    def donor_groups(self) -> tuple[np.ndarray, np.ndarray]:
        """Distinct donor rows and their reuse counts."""
        return np.unique(self.donor_rows, return_counts=True)

    @property
    def total_distance(self) -> float:
        return float(np.sum(self.distances))

    def validate(self, d: Dataset) -> None:
        rows = np.concatenate([self.target_rows, self.donor_rows])
        if np.any(d.s[rows] != 1):
            raise ValueError("matched sample contains a non-survivor")
        if np.any(d.a[self.target_rows] != self.target_arm) or np.any(d.a[self.donor_rows] != self.donor_arm):
            raise ValueError("matched units are in the wrong arm")
        group = set(d.ids[d.group(self.target_arm, 1)].tolist())
        seen = self.target_ids.tolist() + self.unmatched_targets.tolist()
        if len(seen) != len(set(seen)) or set(seen) != group:
            raise ValueError("pairs and unmatched targets do not partition the target group")

    def to_frame(self) -> pd.DataFrame:
        K = self.K
        return pd.DataFrame({
            "target_id": self.target_ids,
            "donor_id": self.donor_ids,
            "distance": self.distances,
            "K": [K[i] for i in self.donor_ids.tolist()],
        })

    def save_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)


def _by_id(d: Dataset, rows: np.ndarray) -> np.ndarray:
    return rows[np.argsort(d.ids[rows], kind="stable")]


def _optimal_assignment(D: np.ndarray) -> list[tuple[int, int]]:
    """Maximum-cardinality, then minimum-cost, assignment on finite edges."""
    finite = np.isfinite(D)
    if not finite.any():
        return []
    big = 2.0 * float(np.sum(D[finite])) + 1.0
    n_t = D.shape[0]
    cost = np.hstack([np.where(finite, D, big), np.full((n_t, n_t), big)])
    r, c = linear_sum_assignment(cost)
    return [(i, j) for i, j in zip(r, c) if j < D.shape[1] and finite[i, j]]


def match(
    d: Dataset,
    spec: DistanceSpec,
    target_arm: int = 0,
    with_replacement: bool = True,
    algorithm: str = "greedy",
) -> MatchedSample:
    """Match every survivor of arm ``target_arm`` to a survivor of the other arm.

    With replacement each target takes its nearest finite-distance donor.
    Without replacement ``greedy`` visits targets by descending ``pi1_as``
    (dataset order when the distance has no score model) and ``optimal`` solves
    the assignment problem, first maximising the number of pairs and then
    minimising their total distance. Exact ties go to the lowest donor id.
    Targets with no finite-distance donor are reported as unmatched.
    """
    if algorithm not in ("greedy", "optimal"):
        raise ValueError("algorithm must be 'greedy' or 'optimal'")
    targets = d.group(target_arm, 1)
    if targets.size == 0:
        raise DataError(f"target group {{A={target_arm}, S=1}} is empty")
    donors = _by_id(d, d.group(1 - target_arm, 1))
    if donors.size == 0:
        raise DataError(f"donor group {{A={1 - target_arm}, S=1}} is empty")
    spec = spec if spec.bound else spec.bind(d)
    D = distance_matrix(spec, d, targets, donors)

    pairs: list[tuple[int, int]] = []
    if with_replacement:
        best = np.argmin(D, axis=1)
        for i, j in enumerate(best):
            if np.isfinite(D[i, j]):
                pairs.append((i, j))
    elif algorithm == "greedy":
        if spec.score_model is not None:
            order = np.argsort(-pi1_as(spec.score_model, d)[targets], kind="stable")
        else:
            order = np.arange(len(targets))
        free = np.ones(len(donors), dtype=bool)
        for i in order:
            row = np.where(free, D[i], np.inf)
            j = int(np.argmin(row))
            if np.isfinite(row[j]):
                pairs.append((i, j))
                free[j] = False
        pairs.sort()
    else:
        pairs = sorted(_optimal_assignment(D))

    ti = np.array([p[0] for p in pairs], dtype=int)
    dj = np.array([p[1] for p in pairs], dtype=int)
    t_rows, d_rows = targets[ti], donors[dj]
    unmatched = np.setdiff1d(np.arange(len(targets)), ti)
    sample = MatchedSample(
        target_arm=target_arm,
        target_rows=t_rows,
        donor_rows=d_rows,
        target_ids=d.ids[t_rows],
        donor_ids=d.ids[d_rows],
        distances=D[ti, dj] if len(pairs) else np.zeros(0),
        unmatched_targets=d.ids[targets[unmatched]],
        with_replacement=with_replacement,
        algorithm="nearest" if with_replacement else algorithm,
        spec=spec,
    )
    sample.validate(d)
    return sample


# --- balance ------------------------------------------------------------------

@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    binary: bool
    mean0: float
    sd0: float
    mean1: float
    sd1: float
    count0: Optional[float]
    count1: Optional[float]
    smd: float


def _weighted_moments(x: np.ndarray, w: np.ndarray) -> tuple[float, float]:
    total = w.sum()
    m = float(np.sum(w * x) / total)
    var = float(np.sum(w * (x - m) ** 2) / (total - 1)) if total > 1 else 0.0
    return m, float(np.sqrt(max(var, 0.0)))


def smd(mean1: float, mean0: float, sd1: float, sd0: float, sd: str = "pooled") -> float:
    """Standardised mean difference ``(mean1 - mean0) / s``.

    ``s`` is ``sqrt((sd0^2 + sd1^2) / 2)`` for ``sd="pooled"``, or the SD of
    one arm for ``"control"``/``"treated"``.
    """
    diff = mean1 - mean0
    s = {"pooled": np.sqrt((sd0 ** 2 + sd1 ** 2) / 2.0), "control": sd0, "treated": sd1}[sd]
    if diff == 0:
        return 0.0
    return float(diff / s) if s > 0 else float(np.sign(diff) * np.inf)


def balance_table(
    d: Dataset,
    sample: Optional[MatchedSample] = None,
    columns: Union[str, Sequence[str]] = "balance",
    rows=None,
    sd: str = "pooled",
) -> list[BalanceRow]:
    """Arm-wise covariate summaries and SMDs.

    Without ``sample`` the arms are compared over ``rows`` (all units by
    default; pass ``d.s == 1`` for survivors). With a matched sample, matched
    targets count once and donors count ``K`` times.
    """
    cols = d.meta.role(columns) if isinstance(columns, str) else list(columns)
    X = d.x(cols)
    if sample is None:
        idx = np.arange(len(d)) if rows is None else np.asarray(rows)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        groups = {arm: (idx[d.a[idx] == arm], np.ones(int(np.sum(d.a[idx] == arm)))) for arm in (0, 1)}
    else:
        t_rows = sample.target_rows
        dr, k = sample.donor_groups()
        groups = {
            sample.target_arm: (t_rows, np.ones(len(t_rows))),
            sample.donor_arm: (dr, k.astype(float)),
        }
    out = []
    for j, name in enumerate(cols):
        binary = d.meta.is_binary(name)
        stats = {}
        for arm in (0, 1):
            r, w = groups[arm]
            if len(r) == 0:
                stats[arm] = (np.nan, np.nan, 0.0 if binary else None)
                continue
            m, s = _weighted_moments(X[r, j], w)
            stats[arm] = (m, s, float(np.sum(w * X[r, j])) if binary else None)
        out.append(BalanceRow(
            covariate=name, binary=binary,
            mean0=stats[0][0], sd0=stats[0][1], mean1=stats[1][0], sd1=stats[1][1],
            count0=stats[0][2], count1=stats[1][2],
            smd=smd(stats[1][0], stats[0][0], stats[1][1], stats[0][1], sd),
        ))
    return out


def balance_frame(rows: Sequence[BalanceRow]) -> pd.DataFrame:
    return pd.DataFrame([dataclasses.asdict(r) for r in rows])


def save_balance_csv(rows: Sequence[BalanceRow], path: Union[str, Path]) -> None:
    balance_frame(rows).to_csv(path, index=False)
