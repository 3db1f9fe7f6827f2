"""Monte Carlo evaluation of the survivor-effect estimators.

Data-generating mechanism
-------------------------
``X0 ~ N_k(0.5, I)``. Strata follow a multinomial logit with the protected
as reference and linear predictors ``g0_g + c_g * sum(x0)`` for
``g in {as, ns}`` (every slope equals ``c_g``), optionally extended by
``square_g * x1^2 + log_g * log|x2|`` when the score model is misspecified.
Always-survivors get both potential outcomes with unit-variance errors of
correlation 0.4, protected units only ``Y(1)``, never-survivors none.
Treatment is a fair coin.
"""

from __future__ import annotations

import dataclasses
import json
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np
import pandas as pd

from .data import ColumnMeta, Dataset
from .estimators import (
    estimate_bias_corrected,
    estimate_composite,
    estimate_crude,
    estimate_naive,
    estimate_regression,
    estimate_weighting,
    fit_outcome_model,
)
from .matching import DistanceSpec, match
from .principal_score import ConvergenceWarning, fit_em_monotonicity

ERROR_CORR = 0.4
LOG_FLOOR = 1e-8


@lru_cache(maxsize=1)
def load_registry() -> dict:
    with resources.files("sacematch.datasets").joinpath("scenarios.json").open() as fh:
        return json.load(fh)


@dataclass(frozen=True)
class ScenarioConfig:
    k: int
    scenario: str = "A"
    pi_pro_level: str = "high"
    ps_misspecified: bool = False
    outcome_interactions: bool = False
    gamma: tuple = ()  # (g0_as, c_as, g0_ns, c_ns)
    misspec: tuple = (0.0, 0.0, 0.0, 0.0)  # (square_as, log_as, square_ns, log_ns)
    beta1: tuple = ()  # (intercept, *slopes) for a = 1
    beta0: tuple = ()
    n: int = 2000
    reps: int = 200
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be positive")
        if len(self.gamma) != 4:
            raise ValueError("gamma needs (g0_as, c_as, g0_ns, c_ns)")
        if len(self.beta1) != self.k + 1 or len(self.beta0) != self.k + 1:
            raise ValueError("beta rows need an intercept and k slopes")
        if self.ps_misspecified and self.k < 2:
            raise ValueError("misspecified score model needs k >= 2")
        for name in ("gamma", "misspec", "beta1", "beta0"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    @property
    def name(self) -> str:
        tag = f"{self.scenario}-{self.pi_pro_level}-k{self.k}"
        if self.ps_misspecified:
            tag += "-mis"
        if self.outcome_interactions:
            tag += "-int"
        return tag

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def scenario(
    name: str = "A", pi_pro: str = "high", k: int = 5, misspecified: bool = False,
    interactions: bool = False, **kw,
) -> ScenarioConfig:
    """Registered configuration, e.g. ``scenario("A", "high", 5)``."""
    reg = load_registry()
    key = f"{name}-{pi_pro}-k{k}"
    if key not in reg["gamma"]:
        raise KeyError(f"no registered scenario {key!r}")
    g = reg["gamma"][key]
    b = reg["beta"]["interactions" if interactions else "no_interactions"][f"k{k}"]
    return ScenarioConfig(
        k=k, scenario=name, pi_pro_level=pi_pro, ps_misspecified=misspecified, outcome_interactions=interactions,
        gamma=(g["g0_as"], g["c_as"], g["g0_ns"], g["c_ns"]),
        misspec=(g["square_as"], g["log_as"], g["square_ns"], g["log_ns"]) if misspecified else (0.0,) * 4,
        beta1=tuple(b["1"]), beta0=tuple(b["0"]), **kw,
    )


def misspecify_ps(x0) -> np.ndarray:
    """Extra score-model terms ``(x1^2, log|x2|)``; ``|x2|`` is floored at 1e-8."""
    x0 = np.asarray(x0, dtype=float)
    if x0.shape[-1] < 2:
        raise ValueError("need at least two covariates")
    return np.stack([x0[..., 0] ** 2, np.log(np.maximum(np.abs(x0[..., 1]), LOG_FLOOR))], axis=-1)


def strata_probabilities(cfg: ScenarioConfig, X: np.ndarray) -> np.ndarray:
    """True (as, pro, ns) probabilities, one row per unit."""
    g0_as, c_as, g0_ns, c_ns = cfg.gamma
    total = X.sum(axis=1)
    eta_as = g0_as + c_as * total
    eta_ns = g0_ns + c_ns * total
    if cfg.ps_misspecified:
        extra = misspecify_ps(X)
        sq_as, lg_as, sq_ns, lg_ns = cfg.misspec
        eta_as = eta_as + sq_as * extra[:, 0] + lg_as * extra[:, 1]
        eta_ns = eta_ns + sq_ns * extra[:, 0] + lg_ns * extra[:, 1]
    eta = np.column_stack([eta_as, np.zeros(len(X)), eta_ns])
    eta -= eta.max(axis=1, keepdims=True)
    p = np.exp(eta)
    p /= p.sum(axis=1, keepdims=True)
    assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1.0)
    return p


@dataclass(frozen=True)
class Truth:
    """Sealed potential-outcome record for one generated dataset."""

    stratum: np.ndarray  # "as" / "pro" / "ns"
    s0: np.ndarray
    s1: np.ndarray
    y0: np.ndarray  # NaN where not generated
    y1: np.ndarray

    def sample_sace(self) -> float:
        m = self.stratum == "as"
        return float(np.mean(self.y1[m] - self.y0[m]))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _meta(k: int) -> ColumnMeta:
    cols = [f"x{j + 1}" for j in range(k)]
    return ColumnMeta(
        columns={c: "continuous" for c in cols},
        roles={r: cols for r in ("distance", "principal_score", "outcome_model", "balance")},
    )


def generate_dataset(cfg: ScenarioConfig, seed=None, n: Optional[int] = None) -> tuple[Dataset, Truth]:
    rng = _rng(seed)
    n = cfg.n if n is None else n
    k = cfg.k
    X = rng.normal(0.5, 1.0, size=(n, k))
    p = strata_probabilities(cfg, X)
    u = rng.random(n)
    cum = np.cumsum(p, axis=1)
    code = (u[:, None] > cum).sum(axis=1)  # 0 = as, 1 = pro, 2 = ns
    stratum = np.array(["as", "pro", "ns"])[code]
    s1 = (code <= 1).astype(int)
    s0 = (code == 0).astype(int)
    cov = np.array([[1.0, ERROR_CORR], [ERROR_CORR, 1.0]])
    eps = rng.multivariate_normal(np.zeros(2), cov, size=n)
    b0, b1 = np.asarray(cfg.beta0), np.asarray(cfg.beta1)
    mean0 = b0[0] + X @ b0[1:]
    mean1 = b1[0] + X @ b1[1:]
    y0 = np.where(s0 == 1, mean0 + eps[:, 0], np.nan)
    y1 = np.where(s1 == 1, mean1 + eps[:, 1], np.nan)
    a = (rng.random(n) < 0.5).astype(int)
    s = np.where(a == 1, s1, s0)
    y = np.where(a == 1, y1, y0)
    y = np.where(s == 1, y, np.nan)
    meta = _meta(k)
    d = Dataset(pd.DataFrame(X, columns=list(meta.columns)), a, s, y, meta)
    return d, Truth(stratum, s0, s1, y0, y1)


@lru_cache(maxsize=64)
def _oracle(cfg: ScenarioConfig, oracle_n: int, seed: int) -> float:
    rng = np.random.default_rng(seed)
    b0, b1 = np.asarray(cfg.beta0), np.asarray(cfg.beta1)
    total, weight = 0.0, 0.0
    chunk = 250_000
    for start in range(0, oracle_n, chunk):
        m = min(chunk, oracle_n - start)
        X = rng.normal(0.5, 1.0, size=(m, cfg.k))
        w = strata_probabilities(cfg, X)[:, 0]
        total += float(np.sum(w * ((b1[0] - b0[0]) + X @ (b1[1:] - b0[1:]))))
        weight += float(np.sum(w))
    return total / weight


def true_sace(cfg: ScenarioConfig, oracle_n: int = 1_000_000, seed: int = 20240101) -> float:
    """Survivor effect implied by the configuration.

    Equal slopes give the intercept difference exactly. Otherwise the
    covariate mean among always-survivors is estimated by weighting
    ``oracle_n`` covariate draws by their always-survivor probability.
    """
    if cfg.beta1[1:] == cfg.beta0[1:]:
        return cfg.beta1[0] - cfg.beta0[0]
    return _oracle(dataclasses.replace(cfg, reps=0, seed=0), oracle_n, seed)


# --- runner -------------------------------------------------------------------

ESTIMATORS = ("crude", "LS", "LS-I", "crude_repl", "BC", "WLS", "WLS-I", "naive", "composite", "weighting")


@dataclass(frozen=True)
class MatchingConfig:
    kind: str = "mahalanobis_with_caliper"
    caliper_sd: float = 0.25
    algorithm: str = "greedy"


def _needs(estimators: Sequence[str]) -> tuple[bool, bool]:
    no_repl = any(e in ("crude", "LS", "LS-I") for e in estimators)
    repl = any(e in ("crude_repl", "BC", "WLS", "WLS-I") for e in estimators)
    return no_repl, repl


def run_replicate(cfg: ScenarioConfig, r: int, estimators: Sequence[str], mcfg: MatchingConfig) -> dict:
    """One replicate; returns ``{estimator: (estimate, se)}`` or raises."""
    seed = np.random.SeedSequence([cfg.seed, r])
    d, _ = generate_dataset(cfg, np.random.default_rng(seed))
    out = {}
    if "naive" in estimators:
        rep = estimate_naive(d)
        out["naive"] = (rep.estimate, rep.se)
    if "composite" in estimators:
        rep = estimate_composite(d)
        out["composite"] = (rep.estimate, rep.se)
    no_repl, repl = _needs(estimators)
    needs_score = "weighting" in estimators or mcfg.kind in ("pi_tilde_abs_diff", "mahalanobis_with_caliper")
    model = None
    if needs_score:
        with warnings.catch_warnings():
            warnings.simplefilter("error", ConvergenceWarning)
            model = fit_em_monotonicity(d, accelerate=True)
    if "weighting" in estimators:
        rep = estimate_weighting(d, model, n_boot=0)
        out["weighting"] = (rep.estimate, rep.se)
    if no_repl or repl:
        caliper = mcfg.caliper_sd if mcfg.kind == "mahalanobis_with_caliper" else None
        spec = DistanceSpec(mcfg.kind, caliper=caliper, caliper_units="sd",
                            score_model=model if mcfg.kind != "mahalanobis" else None).bind(d)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        if no_repl:
            s = match(d, spec, with_replacement=False, algorithm=mcfg.algorithm)
            if "crude" in estimators:
                rep = estimate_crude(s, d)
                out["crude"] = (rep.estimate, rep.se)
            for name, inter in (("LS", False), ("LS-I", True)):
                if name in estimators:
                    rep = estimate_regression(fit_outcome_model(d, s, interactions=inter), s, d)
                    out[name] = (rep.estimate, rep.se)
        if repl:
            s = match(d, spec, with_replacement=True)
            if "crude_repl" in estimators:
                rep = estimate_crude(s, d)
                out["crude_repl"] = (rep.estimate, rep.se)
            if "BC" in estimators:
                rep = estimate_bias_corrected(s, d)
                out["BC"] = (rep.estimate, rep.se)
            for name, inter in (("WLS", False), ("WLS-I", True)):
                if name in estimators:
                    rep = estimate_regression(fit_outcome_model(d, s, interactions=inter), s, d)
                    out[name] = (rep.estimate, rep.se)
    return out


def _safe_replicate(args):
    cfg, r, estimators, mcfg = args
    try:
        return r, run_replicate(cfg, r, estimators, mcfg), None
    except Exception as exc:  # recorded, never silently dropped
        return r, None, f"{type(exc).__name__}: {exc}"


@dataclass
class McSummary:
    scenario: str
    true_sace: float
    table: pd.DataFrame
    n_reps: int
    failures: list = field(default_factory=list)
    replicates: Optional[pd.DataFrame] = None
    seconds: float = 0.0

    @property
    def n_failed(self) -> int:
        return len(self.failures)

    def row(self, estimator: str) -> pd.Series:
        return self.table.set_index("estimator").loc[estimator]

    def to_csv(self, path: Union[str, Path]) -> None:
        out = self.table.copy()
        out.insert(0, "scenario", self.scenario)
        out["true_sace"] = self.true_sace
        out["n_failed"] = self.n_failed
        out.to_csv(path, index=False)


def summarize(estimates: pd.DataFrame, truth: float) -> pd.DataFrame:
    """Mean, Emp.SD, mean Est.SE, MSE and CP95 per estimator.

    ``estimates`` has columns ``replicate, estimator, estimate, se``.
    """
    rows = []
    for name, g in estimates.groupby("estimator", sort=False):
        est = g["estimate"].to_numpy()
        se = g["se"].to_numpy()
        have_se = np.isfinite(se)
        cover = np.abs(est[have_se] - truth) <= 1.959963984540054 * se[have_se]
        rows.append({
            "estimator": name,
            "mean": float(np.mean(est)),
            "emp_sd": float(np.std(est, ddof=1)) if len(est) > 1 else float("nan"),
            "est_se": float(np.mean(se[have_se])) if have_se.any() else float("nan"),
            "mse": float(np.mean((est - truth) ** 2)),
            "cp95": float(np.mean(cover)) if have_se.any() else float("nan"),
            "n": int(len(est)),
        })
    return pd.DataFrame(rows)


def run_scenario(
    cfg: ScenarioConfig,
    estimators: Sequence[str] = ESTIMATORS,
    matching: MatchingConfig = MatchingConfig(),
    reps: Optional[int] = None,
    seed: Optional[int] = None,
    workers: int = 1,
    first_rep: int = 0,
    progress: Optional[Callable[[int], None]] = None,
) -> McSummary:
    """Run replicates ``first_rep .. first_rep + reps - 1``.

    Replicate ``r`` draws from ``SeedSequence([seed, r])`` so any subset of
    replicates is reproducible on its own.
    """
    unknown = [e for e in estimators if e not in ESTIMATORS]
    if unknown:
        raise ValueError(f"unknown estimator(s) {unknown}; choose from {ESTIMATORS}")
    reps = cfg.reps if reps is None else reps
    if reps < 1:
        raise ValueError("reps must be at least 1")
    cfg = dataclasses.replace(cfg, seed=cfg.seed if seed is None else seed)
    truth = true_sace(cfg)
    jobs = [(cfg, r, tuple(estimators), matching) for r in range(first_rep, first_rep + reps)]
    t0 = time.perf_counter()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_safe_replicate, jobs))
    else:
        results = []
        for job in jobs:
            results.append(_safe_replicate(job))
            if progress is not None:
                progress(job[1])
    results.sort(key=lambda t: t[0])
    records, failures = [], []
    for r, res, err in results:
        if err is not None:
            failures.append({"replicate": r, "error": err})
            continue
        for name in estimators:
            est, se = res[name]
            records.append({"replicate": r, "estimator": name, "estimate": est, "se": se})
    per_rep = pd.DataFrame(records, columns=["replicate", "estimator", "estimate", "se"])
    table = summarize(per_rep, truth) if len(per_rep) else pd.DataFrame(
        columns=["estimator", "mean", "emp_sd", "est_se", "mse", "cp95", "n"])
    return McSummary(cfg.name, truth, table, reps, failures, per_rep, time.perf_counter() - t0)
