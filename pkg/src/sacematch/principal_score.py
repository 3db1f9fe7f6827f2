"""Principal scores: EM estimation of latent survival strata.

Strata are always-survivors (``as``), protected (``pro``), harmed (``har``)
and never-survivors (``ns``). Two parameterisations are supported:

* ``monotonicity``: three-category multinomial logit for ``{pro, as, ns}``
  with ``pro`` as reference; the harmed stratum is empty.
* ``cpsr``: the harmed/always-survivor ratio is a fixed ``xi`` for every
  covariate value. The multinomial model is then written for the merged
  category ``ah = as + har`` (reference) against ``pro`` and ``ns``, and
  ``as``/``har`` are recovered by splitting ``ah`` in proportions
  ``1 : xi``.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp

from .data import DataError, Dataset

STRATA = ("as", "pro", "har", "ns")
# Category order of the multinomial fit per variant; index 0 is the reference.
CATEGORIES = {"monotonicity": ("pro", "as", "ns"), "cpsr": ("ah", "pro", "ns")}
WEIGHT_FLOOR = 1e-12
# Largest Newton move per coordinate; only binds near separation.
MAX_STEP = 5.0
# Smallest information eigenvalue, relative to the design scale, of a finite MLE.
SEPARATION_RATIO = 1e-9


class ConvergenceWarning(UserWarning):
    pass


@dataclass(frozen=True)
class MultinomialFit:
    coef: np.ndarray  # (n_categories - 1, n_features); reference row omitted
    converged: bool
    iterations: int
    loglik: float
    grad_norm: float


def _log_proba(X: np.ndarray, coef: np.ndarray) -> np.ndarray:
    eta = np.column_stack([np.zeros(len(X)), X @ coef.T])
    return eta - logsumexp(eta, axis=1, keepdims=True)


def _information(X: np.ndarray, P: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Negative Hessian: sum_i w_i (diag(p_i) - p_i p_i^T) kron x_i x_i^T."""
    p, K1 = X.shape[1], P.shape[1]
    Wp = P * w[:, None]
    H = np.zeros((K1 * p, K1 * p))
    for k in range(K1):
        for l in range(k, K1):
            c = Wp[:, k] * ((k == l) - P[:, l])
            block = (X * c[:, None]).T @ X
            H[k * p:(k + 1) * p, l * p:(l + 1) * p] = block
            H[l * p:(l + 1) * p, k * p:(k + 1) * p] = block.T
    return H


def fit_weighted_multinomial(
    X: np.ndarray,
    labels: np.ndarray,
    weights: Optional[np.ndarray] = None,
    n_categories: Optional[int] = None,
    init: Optional[np.ndarray] = None,
    tol: float = 1e-8,
    max_iter: int = 100,
) -> MultinomialFit:
    """Maximum likelihood for a weighted multinomial logit by damped Newton.

    ``X`` is the full design (include a constant column for an intercept);
    ``labels`` are integer categories ``0..K-1`` with category 0 as the
    reference. Iterates until the gradient norm drops below ``tol``; Newton
    steps are halved until the log-likelihood does not decrease.
    """
    X = np.asarray(X, dtype=float)
    labels = np.asarray(labels, dtype=int)
    w = np.ones(len(X)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.any(w > 0):
        raise ValueError("weights must be nonnegative and not all zero")
    K = int(labels.max()) + 1 if n_categories is None else n_categories
    n, p = X.shape
    active = w > 0
    if np.linalg.matrix_rank(X[active]) < p:
        raise DataError("design matrix is rank deficient on rows with positive weight")
    Y = np.zeros((n, K))
    Y[np.arange(n), labels] = 1.0
    Yw = Y * w[:, None]
    cat_weight = Yw.sum(axis=0)
    degenerate = bool(np.any(cat_weight <= 0))

    coef = np.zeros((K - 1, p)) if init is None else np.array(init, dtype=float).reshape(K - 1, p)

    def loglik(c):
        return float(np.sum(Yw * _log_proba(X, c)))

    ll = loglik(coef)
    grad_norm = np.inf
    it = 0
    for it in range(1, max_iter + 1):
        P = np.exp(_log_proba(X, coef))[:, 1:]
        G = ((Yw[:, 1:] - P * w[:, None]).T @ X).ravel()
        grad_norm = float(np.linalg.norm(G))
        if grad_norm < tol:
            it -= 1
            break
        H = _information(X, P, w)
        try:
            step = np.linalg.solve(H, G)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, G, rcond=None)[0]
        big = np.max(np.abs(step))
        if big > MAX_STEP:
            step *= MAX_STEP / big
        t = 1.0
        for _ in range(40):
            cand = coef + t * step.reshape(K - 1, p)
            ll_cand = loglik(cand)
            if ll_cand >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            break
        coef, ll = cand, ll_cand
    else:
        P = np.exp(_log_proba(X, coef))[:, 1:]
        grad_norm = float(np.linalg.norm(((Yw[:, 1:] - P * w[:, None]).T @ X).ravel()))

    # Under separation the gradient vanishes only because fitted probabilities
    # saturate; the information matrix then collapses relative to the design.
    separated = False
    if not degenerate:
        P = np.exp(_log_proba(X, coef))[:, 1:]
        info = _information(X, P, w)
        scale = np.linalg.eigvalsh((X * w[:, None]).T @ X)[-1]
        separated = bool(np.linalg.eigvalsh(info)[0] < SEPARATION_RATIO * scale)
    converged = grad_norm < tol and not degenerate and not separated
    if not converged:
        if degenerate:
            reason = "a category has zero total weight (MLE does not exist)"
        elif separated:
            reason = "categories are (quasi-)separated; coefficients diverge"
        else:
            reason = f"gradient norm {grad_norm:.2e} after {it} iterations"
        warnings.warn(f"multinomial fit did not converge: {reason}", ConvergenceWarning, stacklevel=2)
    return MultinomialFit(coef=coef, converged=converged, iterations=it, loglik=ll, grad_norm=grad_norm)


@dataclass(frozen=True)
class PiTilde:
    """Always-survivor share among survivors of each arm.

    ``pi1_as = pi_as / (pi_as + pi_pro)`` and ``pi0_as = pi_as / (pi_as + pi_har)``.
    """

    pi1_as: Union[float, np.ndarray]
    pi0_as: Union[float, np.ndarray]


@dataclass(frozen=True)
class StrataProportions:
    pi_as: float
    pi_har: float
    pi_pro: float
    pi_ns: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.pi_as, self.pi_har, self.pi_pro, self.pi_ns)


@dataclass(frozen=True)
class PrincipalScoreModel:
    """Fitted principal-score model.

    ``coef`` has one row per non-reference category of the variant
    (``as, ns`` under monotonicity; ``pro, ns`` under cpsr) and columns
    ``(intercept, *columns)``.
    """

    variant: str
    coef: np.ndarray
    columns: tuple[str, ...]
    xi: float = 0.0
    converged: bool = True
    iterations: int = 0
    loglik: float = float("nan")
    loglik_path: tuple[float, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.variant not in CATEGORIES:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.xi < 0:
            raise ValueError("xi must be nonnegative")
        if self.variant == "monotonicity" and self.xi != 0:
            raise ValueError("monotonicity variant requires xi = 0")
        object.__setattr__(self, "coef", np.asarray(self.coef, dtype=float))
        object.__setattr__(self, "columns", tuple(self.columns))

    @property
    def n_features(self) -> int:
        return len(self.columns)

    def _design(self, x0) -> np.ndarray:
        x0 = np.asarray(x0, dtype=float)
        if x0.ndim == 1:
            x0 = x0[None, :]
        if x0.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} covariates, got {x0.shape[1]}")
        return np.column_stack([np.ones(len(x0)), x0])

    def strata_proba(self, x0) -> np.ndarray:
        """Per-unit stratum probabilities, columns ordered as ``STRATA``."""
        logp = _log_proba(self._design(x0), self.coef)
        p = np.exp(logp)
        out = np.zeros((len(p), 4))
        if self.variant == "monotonicity":
            out[:, 0], out[:, 1], out[:, 3] = p[:, 1], p[:, 0], p[:, 2]
        else:
            out[:, 0] = p[:, 0] / (1.0 + self.xi)
            out[:, 2] = p[:, 0] * self.xi / (1.0 + self.xi)
            out[:, 1], out[:, 3] = p[:, 1], p[:, 2]
        return out

    def pi_tilde(self, x0) -> PiTilde:
        pr = self.strata_proba(x0)
        p_as, p_pro, p_har = pr[:, 0], pr[:, 1], pr[:, 2]
        with np.errstate(invalid="ignore", divide="ignore"):
            pi1 = np.where(p_as + p_pro > 0, p_as / (p_as + p_pro), 1.0)
        if self.variant == "monotonicity":
            pi0 = np.ones_like(pi1)
        else:
            pi0 = np.full_like(pi1, 1.0 / (1.0 + self.xi))
        return PiTilde(pi1_as=pi1, pi0_as=pi0)

    def predict(self, d: Dataset) -> pd.DataFrame:
        return pd.DataFrame(self.strata_proba(d.x(list(self.columns))), columns=STRATA, index=d.ids)

    def coefficient_table(self) -> pd.DataFrame:
        rows = CATEGORIES[self.variant][1:]
        return pd.DataFrame(self.coef, index=list(rows), columns=["intercept", *self.columns])

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "xi": self.xi,
            "reference": CATEGORIES[self.variant][0],
            "columns": list(self.columns),
            "coefficients": {
                cat: dict(zip(["intercept", *self.columns], map(float, row)))
                for cat, row in zip(CATEGORIES[self.variant][1:], self.coef)
            },
            "converged": self.converged,
            "iterations": self.iterations,
            "loglik": self.loglik,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "PrincipalScoreModel":
        cols = raw["columns"]
        cats = CATEGORIES[raw["variant"]][1:]
        coef = np.array([[raw["coefficients"][c][k] for k in ["intercept", *cols]] for c in cats])
        return cls(
            variant=raw["variant"], coef=coef, columns=tuple(cols), xi=float(raw.get("xi", 0.0)),
            converged=bool(raw.get("converged", True)), iterations=int(raw.get("iterations", 0)),
            loglik=float(raw.get("loglik", float("nan"))),
        )

    def save(self, path: Union[str, Path]) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PrincipalScoreModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def predict_pi_tilde(m: PrincipalScoreModel, x0) -> PiTilde:
    """``PiTilde`` for a single covariate vector."""
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim != 1:
        raise ValueError("predict_pi_tilde takes a single covariate vector")
    pt = m.pi_tilde(x0)
    return PiTilde(float(pt.pi1_as[0]), float(pt.pi0_as[0]))


# --- EM ---------------------------------------------------------------------

def _share(la: np.ndarray, lb: np.ndarray) -> np.ndarray:
    """exp(la) / (exp(la) + exp(lb)) computed on the log scale."""
    return np.exp(la - np.logaddexp(la, lb))


def _responsibilities(logp: np.ndarray, a: np.ndarray, s: np.ndarray, variant: str, xi: float) -> np.ndarray:
    """Posterior category membership given (A, S), columns in CATEGORIES order."""
    n = len(a)
    r = np.zeros((n, 3))
    a11, a00 = (a == 1) & (s == 1), (a == 0) & (s == 0)
    a01, a10 = (a == 0) & (s == 1), (a == 1) & (s == 0)
    if variant == "monotonicity":
        pro, as_, ns = 0, 1, 2
        r[a01, as_] = 1.0
        r[a10, ns] = 1.0
        r[a11, as_] = _share(logp[a11, as_], logp[a11, pro])
        r[a11, pro] = 1.0 - r[a11, as_]
        r[a00, ns] = _share(logp[a00, ns], logp[a00, pro])
        r[a00, pro] = 1.0 - r[a00, ns]
    else:
        ah, pro, ns = 0, 1, 2
        r[a01, ah] = 1.0
        r[a00, ns] = _share(logp[a00, ns], logp[a00, pro])
        r[a00, pro] = 1.0 - r[a00, ns]
        if xi > 0:
            r[a10, ah] = _share(logp[a10, ah] + np.log(xi / (1.0 + xi)), logp[a10, ns])
        r[a10, ns] = 1.0 - r[a10, ah]
        r[a11, ah] = _share(logp[a11, ah] - np.log1p(xi), logp[a11, pro])
        r[a11, pro] = 1.0 - r[a11, ah]
    return r


def observed_loglik(coef: np.ndarray, X: np.ndarray, a, s, variant: str = "monotonicity", xi: float = 0.0) -> float:
    """Observed-data log-likelihood of (A, S) given X0, up to the Pr(A) constant.

    ``X`` is the design with a leading constant column.
    """
    a = np.asarray(a)
    s = np.asarray(s)
    lp = _log_proba(X, np.asarray(coef).reshape(2, X.shape[1]))
    l0, l1, l2 = lp[:, 0], lp[:, 1], lp[:, 2]
    if variant == "monotonicity":
        # columns: pro, as, ns
        cells = [l1, l2, np.logaddexp(l1, l0), np.logaddexp(l2, l0)]
    else:
        # columns: ah, pro, ns
        with np.errstate(divide="ignore"):
            lhar = l0 + np.log(xi / (1.0 + xi))
        cells = [l0, np.logaddexp(l2, lhar), np.logaddexp(l0 - np.log1p(xi), l1), np.logaddexp(l2, l1)]
    cell = np.select([(a == 0) & (s == 1), (a == 1) & (s == 0), (a == 1) & (s == 1)], cells[:3], cells[3])
    return float(np.sum(cell))


def augment(X: np.ndarray, resp: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Expand each unit into one weighted row per category it may belong to."""
    resp = np.where(resp < WEIGHT_FLOOR, 0.0, resp)
    unit, cat = np.nonzero(resp)
    return X[unit], cat, resp[unit, cat]


def _check_em_data(a: np.ndarray, s: np.ndarray):
    for arm in (0, 1):
        if not np.any(a == arm):
            raise DataError(f"no units with A={arm}: principal strata are not identified")


def _em_map(coef, X, a, s, variant, xi):
    """One E-step plus M-step; returns the updated coefficients and the inner fit flag."""
    resp = _responsibilities(_log_proba(X, coef), a, s, variant, xi)
    Xa, labels, w = augment(X, resp)
    fit = fit_weighted_multinomial(Xa, labels, w, n_categories=3, init=coef)
    return fit.coef, fit.converged


def _run_em(X, a, s, variant, xi, init, tol, max_iter, accelerate=False):
    p = X.shape[1]
    coef = np.zeros((2, p)) if init is None else np.array(init, dtype=float).reshape(2, p)
    ll = observed_loglik(coef, X, a, s, variant, xi)
    path = [ll]
    inner_ok = True
    converged = False
    it = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        while it < max_iter:
            it += 1
            c1, inner_ok = _em_map(coef, X, a, s, variant, xi)
            r = c1 - coef
            if np.max(np.abs(r)) < tol:
                coef = c1
                path.append(observed_loglik(coef, X, a, s, variant, xi))
                converged = True
                break
            new = c1
            if accelerate and it < max_iter:
                # SQUAREM: extrapolate along two EM steps, then stabilise with
                # one more; fall back to the plain double step if ascent fails.
                it += 1
                c2, inner_ok = _em_map(c1, X, a, s, variant, xi)
                v = (c2 - c1) - r
                nv = np.linalg.norm(v)
                new = c2
                if nv > 0:
                    alpha = min(-1.0, -np.linalg.norm(r) / nv)
                    cand = coef - 2 * alpha * r + alpha ** 2 * v
                    if it < max_iter and np.all(np.isfinite(cand)):
                        it += 1
                        cand, ok = _em_map(cand, X, a, s, variant, xi)
                        if observed_loglik(cand, X, a, s, variant, xi) >= observed_loglik(c2, X, a, s, variant, xi):
                            new, inner_ok = cand, ok
            coef = new
            ll_new = observed_loglik(coef, X, a, s, variant, xi)
            path.append(ll_new)
    # The final cycle only confirms the stopping rule; it is not counted.
    iterations = it - 1 if converged else it
    return coef, converged and inner_ok, iterations, path


def _fit_em(d: Dataset, variant: str, xi: float, columns, init, tol, max_iter, n_starts, seed, accelerate):
    cols = d.meta.role(columns) if isinstance(columns, str) else list(columns)
    X = np.column_stack([np.ones(len(d)), d.x(cols)])
    a, s = d.a, d.s
    _check_em_data(a, s)
    starts = [init]
    if n_starts > 1:
        rng = np.random.default_rng(seed)
        starts += [rng.normal(0.0, 0.5, size=(2, X.shape[1])) for _ in range(n_starts - 1)]
    best = None
    for start in starts:
        res = _run_em(X, a, s, variant, xi, start, tol, max_iter, accelerate)
        if best is None or res[3][-1] > best[3][-1]:
            best = res
    coef, converged, iterations, path = best
    if not converged:
        warnings.warn(f"EM did not converge within {max_iter} iterations", ConvergenceWarning, stacklevel=3)
    return PrincipalScoreModel(
        variant=variant, coef=coef, columns=tuple(cols), xi=xi, converged=converged,
        iterations=iterations, loglik=path[-1], loglik_path=tuple(path),
    )


def fit_em_monotonicity(
    d: Dataset,
    columns: Union[str, Sequence[str]] = "principal_score",
    init: Optional[np.ndarray] = None,
    tol: float = 1e-6,
    max_iter: int = 500,
    n_starts: int = 1,
    seed: Optional[int] = None,
    accelerate: bool = False,
) -> PrincipalScoreModel:
    """EM for the three-stratum model under monotonicity.

    Units in ``{A=0,S=1}`` are always-survivors and ``{A=1,S=0}``
    never-survivors with certainty; ``{A=1,S=1}`` splits between
    always-survivors and protected, ``{A=0,S=0}`` between never-survivors and
    protected. Stops when a plain EM update moves no coefficient by ``tol``
    or more. ``accelerate`` switches on SQUAREM extrapolation (same fixed
    point, far fewer cycles); ``max_iter`` then counts EM maps.
    """
    return _fit_em(d, "monotonicity", 0.0, columns, init, tol, max_iter, n_starts, seed, accelerate)


def fit_em_cpsr(
    d: Dataset,
    xi: float,
    columns: Union[str, Sequence[str]] = "principal_score",
    init: Optional[np.ndarray] = None,
    tol: float = 1e-6,
    max_iter: int = 500,
    n_starts: int = 1,
    seed: Optional[int] = None,
    accelerate: bool = False,
) -> PrincipalScoreModel:
    """EM without monotonicity, for a fixed harmed/always-survivor ratio ``xi``."""
    if xi < 0:
        raise ValueError("xi must be nonnegative")
    lo, hi = xi_bounds(*_rates(d))
    if not lo - 1e-12 <= xi <= hi + 1e-12:
        warnings.warn(f"xi={xi} outside the empirical bounds [{lo:.4f}, {hi:.4f}]", UserWarning, stacklevel=2)
    return _fit_em(d, "cpsr", float(xi), columns, init, tol, max_iter, n_starts, seed, accelerate)


def _rates(d: Dataset) -> tuple[float, float]:
    from .data import survival_rates

    return survival_rates(d)


# --- Strata algebra -----------------------------------------------------------

def xi_bounds(p0: float, p1: float) -> tuple[float, float]:
    """Range of harmed/always-survivor ratios compatible with survival rates ``p0, p1``.

    The lower limit keeps the protected share nonnegative and the upper limit
    the never-survivor share; the upper limit is capped at 1, and when
    ``p0 + p1 <= 1`` the never-survivor constraint cannot bind.
    """
    if p1 <= 0:
        raise ValueError("p1 must be positive")
    if not (0 < p0 <= 1 and p1 <= 1):
        raise ValueError("survival rates must lie in (0, 1]")
    lo = max(0.0, (p0 - p1) / p1)
    denom = p0 - (1.0 - p1)
    hi = min(1.0, (1.0 - p1) / denom) if denom > 0 else 1.0
    if lo > hi:
        raise ValueError(f"empty xi range [{lo:.4f}, {hi:.4f}] for p0={p0}, p1={p1}")
    return lo, hi


def strata_proportions(p0: float, p1: float, xi: float = 0.0) -> StrataProportions:
    lo, hi = xi_bounds(p0, p1)
    if not lo - 1e-12 <= xi <= hi + 1e-12:
        raise ValueError(f"xi={xi} outside the bounds [{lo:.4f}, {hi:.4f}]")
    pi_as = p0 / (1.0 + xi)
    pi_har = xi * p0 / (1.0 + xi)
    pi_pro = p1 - pi_as
    pi_ns = 1.0 - p1 - pi_har
    return StrataProportions(pi_as, pi_har, max(pi_pro, 0.0), max(pi_ns, 0.0))
