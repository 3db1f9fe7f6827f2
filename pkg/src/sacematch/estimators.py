"""Point estimates, standard errors and intervals for the survivor effect.

Every report is a treated-minus-untreated contrast in outcome units.
"""

from __future__ import annotations

import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .data import DataError, Dataset
from .matching import DistanceSpec, MatchedSample, distance_matrix, match, pi1_as
from .principal_score import PrincipalScoreModel

Z95 = 1.959963984540054

TAGS = ("crude", "regression", "regression_interactions", "bias_corrected", "weighting", "naive", "composite")


@dataclass(frozen=True)
class EstimateReport:
    estimator: str
    estimate: float
    se: float
    ci_lo: float
    ci_hi: float
    ci_method: str = "wald"
    n_pairs: Optional[int] = None
    n_unmatched: Optional[int] = None
    params: dict = field(default_factory=lambda: {"alpha1": 1.0, "alpha0": 1.0, "xi": 0.0})
    extra: dict = field(default_factory=dict)

    @classmethod
    def wald(cls, estimator: str, estimate: float, se: float, **kw) -> "EstimateReport":
        return cls(estimator, float(estimate), float(se), float(estimate - Z95 * se), float(estimate + Z95 * se), **kw)

    @property
    def ci95(self) -> tuple[float, float]:
        return (self.ci_lo, self.ci_hi)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, default=float)

    def to_row(self) -> dict:
        row = {k: getattr(self, k) for k in ("estimator", "estimate", "se", "ci_lo", "ci_hi", "ci_method", "n_pairs")}
        row["params"] = json.dumps(self.params, sort_keys=True)
        return row


# --- outcome regression -----------------------------------------------------------

@dataclass(frozen=True)
class OutcomeModel:
    """Weighted least-squares fit of ``Y ~ 1 + A + X0 (+ A:X0)`` among survivors.

    ``coef`` is ordered ``(intercept, A, *columns, *A:columns)``. ``clusters``
    label the rows for the sandwich variance; ``fitted_on`` records whether
    the rows came from a matched sample or all survivors.
    """

    coef: np.ndarray
    columns: tuple[str, ...]
    interactions: bool
    design: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)
    weights: np.ndarray = field(repr=False)
    clusters: np.ndarray = field(repr=False)
    rows: np.ndarray = field(repr=False)
    fitted_on: str = "matched"
    sample_key: Optional[tuple] = field(default=None, repr=False)

    @property
    def residuals(self) -> np.ndarray:
        return self.y - self.design @ self.coef

    @property
    def beta1(self) -> float:
        return float(self.coef[1])

    @property
    def names(self) -> list[str]:
        names = ["intercept", "A", *self.columns]
        if self.interactions:
            names += [f"A:{c}" for c in self.columns]
        return names

    def g(self, x0: np.ndarray) -> np.ndarray:
        """Conditional effect E(Y|A=1,S=1,x0) - E(Y|A=0,S=1,x0)."""
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        out = np.full(len(x0), self.coef[1])
        if self.interactions:
            p = len(self.columns)
            out = out + x0 @ self.coef[2 + p:]
        return out

    def predict(self, a, x0) -> np.ndarray:
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        a = np.broadcast_to(np.asarray(a, dtype=float), (len(x0),))
        return _design(a, x0, self.interactions) @ self.coef

    def cluster_cov(self) -> np.ndarray:
        """``(X'WX)^-1 (sum_c X_c' W_c e_c e_c' W_c X_c) (X'WX)^-1``."""
        X, w, e = self.design, self.weights, self.residuals
        bread = np.linalg.inv(X.T @ (X * w[:, None]))
        score = X * (w * e)[:, None]
        _, inv = np.unique(self.clusters, return_inverse=True)
        S = np.zeros((inv.max() + 1, X.shape[1]))
        np.add.at(S, inv, score)
        return bread @ (S.T @ S) @ bread


def _design(a: np.ndarray, X: np.ndarray, interactions: bool) -> np.ndarray:
    parts = [np.ones(len(a)), a, X]
    if interactions:
        parts.append(X * a[:, None])
    return np.column_stack(parts)


def _sample_key(sample: MatchedSample) -> tuple:
    return (sample.target_arm, sample.with_replacement, sample.target_rows.tobytes(), sample.donor_rows.tobytes())


def _sample_rows(sample: MatchedSample) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Rows, weights and cluster labels of a matched sample's regression data."""
    if sample.with_replacement:
        donors, k = sample.donor_groups()
        rows = np.concatenate([sample.target_rows, donors])
        weights = np.concatenate([np.ones(sample.n_pairs), k.astype(float)])
        # Donor-centred groups: a donor and all targets matched to it.
        clusters = np.concatenate([sample.donor_rows, donors])
    else:
        rows = np.concatenate([sample.target_rows, sample.donor_rows])
        weights = np.ones(len(rows))
        pair = np.arange(sample.n_pairs)
        clusters = np.concatenate([pair, pair])
    return rows, weights, clusters


def fit_outcome_model(
    d: Dataset,
    sample: Optional[MatchedSample] = None,
    interactions: bool = False,
    weights=None,
    columns: Union[str, Sequence[str]] = "outcome_model",
) -> OutcomeModel:
    """Weighted least squares among survivors.

    With a matched sample the fit uses matched units only: each target once,
    each donor with weight ``K`` (with replacement) or 1 (without). Without a
    sample it uses every survivor with unit weights (or ``weights``), each
    unit its own cluster.
    """
    cols = tuple(d.meta.role(columns) if isinstance(columns, str) else columns)
    if sample is not None:
        rows, w, clusters = _sample_rows(sample)
        fitted_on, key = "matched", _sample_key(sample)
    else:
        rows = np.flatnonzero(d.s == 1)
        w = np.ones(len(rows))
        clusters = rows.copy()
        fitted_on, key = "survivors", None
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if w.shape != rows.shape or np.any(w < 0):
            raise ValueError("weights must be nonnegative, one per fitting row")
    a = d.a[rows].astype(float)
    X = _design(a, d.x(list(cols))[rows], interactions)
    y = d.y[rows]
    if np.linalg.matrix_rank(X[w > 0]) < X.shape[1]:
        raise DataError("outcome-model design is rank deficient on the fitting sample")
    sw = np.sqrt(w)
    coef = np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]
    return OutcomeModel(coef, cols, interactions, X, y, w, clusters, rows, fitted_on, key)


def estimate_regression(model: OutcomeModel, sample: MatchedSample, d: Dataset) -> EstimateReport:
    """Average of the model's conditional effect over the matched targets.

    Without interactions this is the treatment coefficient itself.
    """
    if model.sample_key is not None and model.sample_key != _sample_key(sample):
        raise ValueError("outcome model was fitted on a different matched sample")
    V = model.cluster_cov()
    L = np.zeros(len(model.coef))
    L[1] = 1.0
    var = 0.0
    if model.interactions:
        Xt = d.x(list(model.columns))[sample.target_rows]
        L[2 + len(model.columns):] = Xt.mean(axis=0)
        est = float(L @ model.coef)
        tag = "regression_interactions"
        # The target covariate mean is itself estimated.
        if len(Xt) > 1:
            var = float(np.var(model.g(Xt), ddof=1) / len(Xt))
    else:
        est = model.coef[1]
        tag = "regression"
    se = float(np.sqrt(max(L @ V @ L, 0.0) + var))
    return EstimateReport.wald(tag, est, se, n_pairs=sample.n_pairs, n_unmatched=len(sample.unmatched_targets),
                               extra={"weighted": bool(sample.with_replacement)})


# --- crude and bias-corrected ---------------------------------------------------------

def _check_sample(sample: MatchedSample, d: Dataset):
    if sample.n_pairs == 0:
        raise DataError("matched sample has no pairs")
    if len(sample.unmatched_targets):
        warnings.warn(
            f"{len(sample.unmatched_targets)} target(s) unmatched; the estimate describes the matched subset only",
            UserWarning, stacklevel=3,
        )


def _signed_diffs(sample: MatchedSample, y_target: np.ndarray, y_donor: np.ndarray) -> np.ndarray:
    diff = y_donor - y_target
    return diff if sample.target_arm == 0 else -diff


def _nearest_same_arm_var(d: Dataset, spec: DistanceSpec, rows: np.ndarray, arm: int) -> np.ndarray:
    """sigma^2_u = (Y_u - Y_l(u))^2 / 2 with l(u) the nearest other survivor of the same arm."""
    pool = d.group(arm, 1)
    pool = pool[np.argsort(d.ids[pool], kind="stable")]
    if len(pool) < 2:
        raise DataError(f"need two survivors with A={arm} for the variance estimate")
    D = distance_matrix(spec, d, rows, pool)
    D[rows[:, None] == pool[None, :]] = np.inf
    dead = ~np.isfinite(D).any(axis=1)
    if dead.any():
        plain = DistanceSpec("mahalanobis", columns=_fallback_columns(spec, d)).bind(d)
        Dp = distance_matrix(plain, d, rows[dead], pool)
        Dp[rows[dead][:, None] == pool[None, :]] = np.inf
        D[dead] = Dp
    nearest = pool[np.argmin(D, axis=1)]
    return (d.y[rows] - d.y[nearest]) ** 2 / 2.0


def _fallback_columns(spec: DistanceSpec, d: Dataset):
    if spec.kind == "pi_tilde_abs_diff":
        return tuple(spec.score_model.columns)
    return spec.columns


def _replacement_variance(d: Dataset, sample: MatchedSample, diffs: np.ndarray, tau: float) -> float:
    spec = sample.spec if sample.spec is not None else DistanceSpec("mahalanobis").bind(d)
    n0 = sample.n_pairs
    donors, k = sample.donor_groups()
    s2_t = _nearest_same_arm_var(d, spec, sample.target_rows, sample.target_arm)
    s2_d = _nearest_same_arm_var(d, spec, donors, sample.donor_arm)
    s2_of_donor = dict(zip(donors.tolist(), s2_d))
    s2_m = np.array([s2_of_donor[r] for r in sample.donor_rows.tolist()])
    H = (np.sum((diffs - tau) ** 2) - np.sum(s2_t + s2_m)) / n0 ** 2
    return float(max(0.0, H) + (np.sum(s2_t) + np.sum(k.astype(float) ** 2 * s2_d)) / n0 ** 2)


def estimate_crude(sample: MatchedSample, d: Dataset) -> EstimateReport:
    """Mean within-pair outcome difference.

    SE: paired-difference SD / sqrt(n) without replacement; with
    replacement, the matching variance with nearest-neighbour conditional
    variances (see ``_replacement_variance``).
    """
    _check_sample(sample, d)
    diffs = _signed_diffs(sample, d.y[sample.target_rows], d.y[sample.donor_rows])
    tau = float(np.mean(diffs))
    if sample.with_replacement:
        se = np.sqrt(_replacement_variance(d, sample, diffs, tau))
    else:
        se = float(np.std(diffs, ddof=1) / np.sqrt(len(diffs))) if len(diffs) > 1 else np.nan
    return EstimateReport.wald("crude", tau, se, n_pairs=sample.n_pairs, n_unmatched=len(sample.unmatched_targets))


@dataclass(frozen=True)
class ArmRegression:
    """Linear regression of Y on X0 within one survivor arm."""

    coef: np.ndarray
    columns: tuple[str, ...]
    arm: int

    def predict(self, x0) -> np.ndarray:
        x0 = np.atleast_2d(np.asarray(x0, dtype=float))
        return self.coef[0] + x0 @ self.coef[1:]


def fit_arm_regression(d: Dataset, arm: int = 1, columns: Union[str, Sequence[str]] = "outcome_model") -> ArmRegression:
    cols = tuple(d.meta.role(columns) if isinstance(columns, str) else columns)
    rows = d.group(arm, 1)
    X = np.column_stack([np.ones(len(rows)), d.x(list(cols))[rows]])
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise DataError(f"arm-{arm} regression design is rank deficient")
    coef = np.linalg.lstsq(X, d.y[rows], rcond=None)[0]
    return ArmRegression(coef, cols, arm)


def estimate_bias_corrected(
    sample: MatchedSample, d: Dataset, mu: Optional[ArmRegression] = None
) -> EstimateReport:
    """Crude estimate with each donor outcome shifted by ``mu(x_target) - mu(x_donor)``.

    ``mu`` is a regression fitted on all survivors of the donor arm before
    matching; by default it is fitted here on the outcome-model columns.
    """
    if not sample.with_replacement:
        raise ValueError("the bias-corrected estimator is defined for matching with replacement only")
    _check_sample(sample, d)
    mu = fit_arm_regression(d, sample.donor_arm) if mu is None else mu
    if mu.arm != sample.donor_arm:
        raise ValueError("bias-correction regression must be fitted on the donor arm")
    X = d.x(list(mu.columns))
    y_donor = d.y[sample.donor_rows] + mu.predict(X[sample.target_rows]) - mu.predict(X[sample.donor_rows])
    diffs = _signed_diffs(sample, d.y[sample.target_rows], y_donor)
    tau = float(np.mean(diffs))
    se = np.sqrt(_replacement_variance(d, sample, diffs, tau))
    return EstimateReport.wald("bias_corrected", tau, se, n_pairs=sample.n_pairs,
                               n_unmatched=len(sample.unmatched_targets))


# --- comparators ------------------------------------------------------------------

def _two_sample(y1: np.ndarray, y0: np.ndarray) -> tuple[float, float]:
    if len(y1) < 2 or len(y0) < 2:
        raise DataError("each arm needs at least two observations")
    est = float(np.mean(y1) - np.mean(y0))
    se = float(np.sqrt(np.var(y1, ddof=1) / len(y1) + np.var(y0, ddof=1) / len(y0)))
    return est, se


def estimate_naive(d: Dataset) -> EstimateReport:
    """Survivor mean outcome, treated minus untreated."""
    est, se = _two_sample(d.y[d.group(1, 1)], d.y[d.group(0, 1)])
    return EstimateReport.wald("naive", est, se)


def estimate_composite(d: Dataset) -> EstimateReport:
    """Mean of ``S * Y`` (zero for non-survivors), treated minus untreated."""
    sy = np.where(d.s == 1, d.y, 0.0)
    est, se = _two_sample(sy[d.a == 1], sy[d.a == 0])
    return EstimateReport.wald("composite", est, se)


def _weighting_point(y1: np.ndarray, w1: np.ndarray, y0: np.ndarray) -> float:
    return float(np.sum(w1 * y1) / np.sum(w1) - np.mean(y0))


def estimate_weighting(
    d: Dataset, m: PrincipalScoreModel, n_boot: int = 500, seed: Optional[int] = 0
) -> EstimateReport:
    """Principal-score weighting comparator.

    Under monotonicity the covariate density of always-survivors is
    proportional to the density among treated survivors times ``pi1_as``, so
    ``E[Y(1)|as]`` is the ``pi1_as``-weighted treated-survivor mean, while
    every untreated survivor is an always-survivor. The CI is a percentile
    bootstrap resampling units within arms with the score model held fixed.
    """
    if m.variant != "monotonicity":
        raise ValueError("weighting comparator requires a monotonicity score model")
    t, c = d.group(1, 1), d.group(0, 1)
    w = pi1_as(m, d)
    if not np.any(w[t] > 0):
        raise DataError("all always-survivor weights are zero")
    est = _weighting_point(d.y[t], w[t], d.y[c])
    if n_boot == 0:
        return EstimateReport("weighting", est, float("nan"), float("nan"), float("nan"), ci_method="none")
    arms = [np.flatnonzero(d.a == 0), np.flatnonzero(d.a == 1)]
    rng = np.random.default_rng(seed)
    boot = np.empty(n_boot)
    for b in range(n_boot):
        rows = np.concatenate([rng.choice(r, size=len(r), replace=True) for r in arms])
        tb = rows[(d.a[rows] == 1) & (d.s[rows] == 1)]
        cb = rows[(d.a[rows] == 0) & (d.s[rows] == 1)]
        if len(cb) == 0 or not np.any(w[tb] > 0):
            boot[b] = np.nan
            continue
        boot[b] = _weighting_point(d.y[tb], w[tb], d.y[cb])
    boot = boot[np.isfinite(boot)]
    lo, hi = np.percentile(boot, [2.5, 97.5])
    return EstimateReport("weighting", est, float(np.std(boot, ddof=1)), float(lo), float(hi), ci_method="percentile",
                          extra={"n_boot": int(len(boot)), "seed": seed})


# --- conditional separable effects ---------------------------------------------------

def estimate_cse(
    d: Dataset,
    a_s: int,
    spec: DistanceSpec,
    estimator: str = "crude",
    with_replacement: bool = True,
    algorithm: str = "greedy",
) -> EstimateReport:
    """Separable effect among survivors of arm ``a_s``.

    Survivors of arm ``a_s`` are matched to the other arm on the distance
    covariates plus the post-treatment covariates, and the contrast is
    averaged over them. With no post-treatment covariates and ``a_s = 0``
    this is the survivor-effect pipeline.
    """
    if a_s not in (0, 1):
        raise ValueError("a_s must be 0 or 1")
    if "post_treatment" not in d.meta.roles:
        raise DataError("no post-treatment covariate role declared; use an empty list for none")
    x1 = list(d.meta.role("post_treatment"))
    if d.group(a_s, 1).size == 0:
        raise DataError(f"target group {{A={a_s}, S=1}} is empty")
    base = d.meta.role(spec.columns) if isinstance(spec.columns, str) else list(spec.columns)
    cols = tuple(base + [c for c in x1 if c not in base])
    spec = dataclasses.replace(spec, columns=cols, cov=None if x1 else spec.cov, x0_columns=None)
    sample = match(d, spec, target_arm=a_s, with_replacement=with_replacement, algorithm=algorithm)
    if estimator == "crude":
        rep = estimate_crude(sample, d)
    elif estimator in ("regression", "regression_interactions"):
        out_cols = d.meta.role("outcome_model") + [c for c in x1 if c not in d.meta.role("outcome_model")]
        model = fit_outcome_model(d, sample, interactions=estimator == "regression_interactions", columns=out_cols)
        rep = estimate_regression(model, sample, d)
    else:
        raise ValueError(f"unsupported CSE estimator {estimator!r}")
    return dataclasses.replace(rep, estimator=f"cse({a_s})", extra={**rep.extra, "base": rep.estimator})
