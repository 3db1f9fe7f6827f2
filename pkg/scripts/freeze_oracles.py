"""Independent numerical oracles for the principal-score tests.

Each likelihood is written out cell by cell from the stratum probabilities
and maximised with a generic quasi-Newton optimiser, without touching the
package's EM or Newton code. The printed numbers are frozen into
``tests/test_principal_score.py``.
"""

import sys
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.special import softmax

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from oracle_data import em_instance, multinomial_instance, regression_instance  # noqa: E402


def multinomial_oracle(X, labels, w):
    def nll(theta):
        eta = np.column_stack([np.zeros(len(X)), X @ theta.reshape(2, -1).T])
        logp = eta - np.log(np.exp(eta).sum(axis=1, keepdims=True))
        return -np.sum(w * logp[np.arange(len(X)), labels])

    res = minimize(nll, np.zeros(2 * X.shape[1]), method="BFGS", options={"gtol": 1e-10})
    return res.x.reshape(2, -1), -res.fun


def em_oracle(x, a, s, variant, xi=0.0):
    X = np.column_stack([np.ones(len(x)), x])

    def nll(theta):
        P = softmax(np.column_stack([np.zeros(len(x)), X @ theta.reshape(2, 2).T]), axis=1)
        if variant == "monotonicity":
            pro, as_, ns = P.T
            har = np.zeros_like(pro)
        else:
            ah, pro, ns = P.T
            as_, har = ah / (1 + xi), ah * xi / (1 + xi)
        # Pr(S=1 | A=1) = as + pro ; Pr(S=1 | A=0) = as + har
        cell = np.where(a == 1, np.where(s == 1, as_ + pro, har + ns), np.where(s == 1, as_ + har, pro + ns))
        return -np.sum(np.log(cell))

    best = None
    for start in ([0, 0, 0, 0], [1, 0.5, -1, -0.5], [-1, 1, 0.5, -1]):
        res = minimize(nll, np.array(start, float), method="BFGS", options={"gtol": 1e-9})
        if best is None or res.fun < best.fun:
            best = res
    return best.x.reshape(2, 2), -best.fun


def normal_equations_oracle(x, a, y, w):
    """Weighted least squares by forming and solving X'WX b = X'Wy."""
    X = np.column_stack([np.ones(len(a)), a, x])
    XtW = X.T * w
    return np.linalg.solve(XtW @ X, XtW @ y)


if __name__ == "__main__":
    np.set_printoptions(precision=10)
    coef, ll = multinomial_oracle(*multinomial_instance())
    print("multinomial coef", repr(coef), "loglik", repr(ll))
    for variant, xi in (("monotonicity", 0.0), ("cpsr", 0.2)):
        coef, ll = em_oracle(*em_instance(variant, xi=xi), variant, xi)
        print(variant, xi, "coef", repr(coef), "loglik", repr(ll))
    x, a, y, w = regression_instance()
    print("wls weighted", repr(normal_equations_oracle(x, a, y, w)))
    print("wls unweighted", repr(normal_equations_oracle(x, a, y, np.ones_like(w))))
