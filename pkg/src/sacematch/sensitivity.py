"""Sensitivity of the survivor effect to the two untestable assumptions.

``alpha1`` scales the treated mean outcome of protected units relative to
always-survivors with the same covariates (principal ignorability).
``xi`` is the harmed/always-survivor ratio and ``alpha0`` the analogous
untreated-outcome ratio for harmed units (monotonicity). Each grid point
re-weights the fitted arm means of the outcome model and averages over the
matched targets; the estimate is linear in the regression coefficients, so
its SE combines ``L' V L`` (cluster-robust ``V``) with the spread of the
per-target plug-in values.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd

from .data import Dataset, survival_rates
from .estimators import EstimateReport, OutcomeModel, _design, fit_outcome_model
from .matching import DistanceSpec, MatchedSample, match, pi1_as
from .principal_score import PrincipalScoreModel, fit_em_cpsr, xi_bounds

DEFAULT_ALPHA1 = tuple(np.round(np.arange(0.5, 2.0001, 0.1), 10))
DEFAULT_ALPHA0 = (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)


def default_xi_grid(p0: float, p1: float, step: float = 0.1) -> tuple[float, ...]:
    """From the lower ξ bound in ``step`` increments, plus the upper bound."""
    lo, hi = xi_bounds(p0, p1)
    vals = list(np.round(np.arange(lo, hi, step), 10))
    if not vals or hi - vals[-1] > 1e-9:
        vals.append(hi)
    return tuple(float(v) for v in vals)


@dataclass(frozen=True)
class SensitivityPoint:
    alpha1: float
    xi: float
    alpha0: float
    report: EstimateReport


@dataclass
class SensitivityGrid:
    kind: str
    base: EstimateReport
    points: list[SensitivityPoint] = field(default_factory=list)

    def __post_init__(self):
        if self.kind not in ("ppi", "monotonicity"):
            raise ValueError("kind must be 'ppi' or 'monotonicity'")
        self.points.sort(key=lambda p: (p.xi, p.alpha0, p.alpha1))

    def to_frame(self) -> pd.DataFrame:
        keys = ["alpha1"] if self.kind == "ppi" else ["xi", "alpha0"]
        rows = []
        for p in self.points:
            row = {k: getattr(p, k) for k in keys}
            row.update(estimate=p.report.estimate, se=p.report.se, ci_lo=p.report.ci_lo, ci_hi=p.report.ci_hi)
            rows.append(row)
        return pd.DataFrame(rows)

    def save_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False)

    def at(self, **params) -> EstimateReport:
        for p in self.points:
            if all(np.isclose(getattr(p, k), v) for k, v in params.items()):
                return p.report
        raise KeyError(params)


def _arm_designs(model: OutcomeModel, d: Dataset, rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    X = d.x(list(model.columns))[rows]
    n = len(rows)
    return _design(np.ones(n), X, model.interactions), _design(np.zeros(n), X, model.interactions)


def _point(model: OutcomeModel, V: np.ndarray, D1, D0, w1, w0, params: dict, sample: MatchedSample) -> EstimateReport:
    """Average of ``w1 * m1 - w0 * m0`` over targets, with its delta-method SE."""
    m1, m0 = D1 @ model.coef, D0 @ model.coef
    h = w1 * m1 - w0 * m0
    est = float(np.mean(h))
    L = (w1[:, None] * D1 - w0[:, None] * D0).mean(axis=0)
    # Coefficient uncertainty plus variation of the plug-in across targets.
    spread = float(np.var(h, ddof=1) / len(h)) if len(h) > 1 else 0.0
    se = float(np.sqrt(max(L @ V @ L, 0.0) + spread))
    return EstimateReport.wald("regression_interactions" if model.interactions else "regression", est, se,
                               n_pairs=sample.n_pairs, params=params)


def sweep_ppi(
    d: Dataset,
    sample: MatchedSample,
    score_model: PrincipalScoreModel,
    model: Optional[OutcomeModel] = None,
    alpha1_values: Sequence[float] = DEFAULT_ALPHA1,
) -> SensitivityGrid:
    """Effect estimates as the protected/always-survivor outcome ratio ``alpha1`` varies.

    The treated mean at ``x0`` is divided by ``pi + alpha1 (1 - pi)``, written
    as ``1 + (alpha1 - 1)(1 - pi)`` so that ``alpha1 = 1`` is exact.
    """
    if score_model.variant != "monotonicity":
        raise ValueError("PPI sensitivity requires a monotonicity score model")
    alpha1_values = [float(a) for a in alpha1_values]
    if not alpha1_values:
        raise ValueError("empty alpha1 grid")
    if any(a <= 0 for a in alpha1_values):
        raise ValueError("alpha1 values must be positive")
    model = fit_outcome_model(d, sample) if model is None else model
    V = model.cluster_cov()
    rows = sample.target_rows
    D1, D0 = _arm_designs(model, d, rows)
    pi = pi1_as(score_model, d)[rows]
    one = np.ones(len(rows))
    base = _point(model, V, D1, D0, one, one, {"alpha1": 1.0, "alpha0": 1.0, "xi": 0.0}, sample)
    points = []
    for a1 in alpha1_values:
        denom = 1.0 + (a1 - 1.0) * (1.0 - pi)
        assert np.all(denom > 0)
        rep = _point(model, V, D1, D0, 1.0 / denom, one, {"alpha1": a1, "alpha0": 1.0, "xi": 0.0}, sample)
        points.append(SensitivityPoint(a1, 0.0, 1.0, rep))
    return SensitivityGrid("ppi", base, points)


def _mono_points(model, d, sample, xi, alpha0_values):
    V = model.cluster_cov()
    D1, D0 = _arm_designs(model, d, sample.target_rows)
    one = np.ones(sample.n_pairs)
    out = []
    for a0 in alpha0_values:
        factor = (1.0 + xi) / (1.0 + xi * a0)
        rep = _point(model, V, D1, D0, one, factor * one, {"alpha1": 1.0, "alpha0": a0, "xi": xi}, sample)
        out.append(SensitivityPoint(1.0, xi, a0, rep))
    return out


def sweep_monotonicity(
    d: Dataset,
    sample: MatchedSample,
    model: Optional[OutcomeModel] = None,
    xi_values: Optional[Sequence[float]] = None,
    alpha0_values: Sequence[float] = DEFAULT_ALPHA0,
    refit_em_per_xi: bool = False,
    spec: Optional[DistanceSpec] = None,
    interactions: bool = False,
    em_kwargs: Optional[dict] = None,
    threads: int = 1,
) -> SensitivityGrid:
    """Effect estimates over a (ξ, alpha0) grid.

    The untreated mean is scaled by ``(1 + xi) / (1 + xi * alpha0)``. By
    default the matched sample and outcome model are frozen. With
    ``refit_em_per_xi`` the score model is refitted for each ξ and the
    sample rematched with ``spec`` (whose score model is replaced).
    """
    p0, p1 = survival_rates(d)
    lo, hi = xi_bounds(p0, p1)
    xi_values = default_xi_grid(p0, p1) if xi_values is None else tuple(float(x) for x in xi_values)
    alpha0_values = [float(a) for a in alpha0_values]
    if not xi_values or not alpha0_values:
        raise ValueError("empty sensitivity grid")
    if any(a <= 0 for a in alpha0_values):
        raise ValueError("alpha0 values must be positive")
    bad = [x for x in xi_values if not lo - 1e-9 <= x <= hi + 1e-9]
    if bad:
        raise ValueError(f"xi value(s) {bad} outside the bounds [{lo:.4f}, {hi:.4f}]")
    model = fit_outcome_model(d, sample, interactions=interactions) if model is None else model
    V = model.cluster_cov()
    D1, D0 = _arm_designs(model, d, sample.target_rows)
    one = np.ones(sample.n_pairs)
    base = _point(model, V, D1, D0, one, one, {"alpha1": 1.0, "alpha0": 1.0, "xi": 0.0}, sample)

    if not refit_em_per_xi:
        points = [p for xi in xi_values for p in _mono_points(model, d, sample, xi, alpha0_values)]
        return SensitivityGrid("monotonicity", base, points)

    if spec is None or not spec.uses_score:
        raise ValueError("refit_em_per_xi needs a distance spec that uses the score model")
    spec = dataclasses.replace(spec, x0_columns=None) if spec.caliper_units == "sd" else spec

    def one_xi(xi):
        sm = fit_em_cpsr(d, xi, columns=list(spec.score_model.columns), **(em_kwargs or {}))
        s = match(d, dataclasses.replace(spec, score_model=sm, cov=None, x0_columns=None),
                  target_arm=sample.target_arm, with_replacement=sample.with_replacement, algorithm=sample.algorithm
                  if sample.algorithm != "nearest" else "greedy")
        m = fit_outcome_model(d, s, interactions=model.interactions, columns=model.columns)
        return _mono_points(m, d, s, xi, alpha0_values)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        points = [p for pts in pool.map(one_xi, xi_values) for p in pts]
    return SensitivityGrid("monotonicity", base, points)
