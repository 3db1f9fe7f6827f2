import sys
import numpy as np
import pandas as pd
import pytest

from sacematch.data import ColumnMeta, Dataset, load_nsw
from sacematch.matching import DistanceSpec, match
from sacematch.principal_score import fit_em_monotonicity


def make_dataset(x, a, s, y=None, roles=None, x1=None, ids=None):
    """Small dataset builder; every role defaults to all x0 columns."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    a = np.asarray(a, dtype=int)
    s = np.asarray(s, dtype=int)
    cols = [f"x{j + 1}" for j in range(x.shape[1])]
    frame = pd.DataFrame(x, columns=cols)
    types = {c: "continuous" for c in cols}
    post = []
    if x1 is not None:
        x1 = np.asarray(x1, dtype=float).reshape(len(a), -1)
        post = [f"w{j + 1}" for j in range(x1.shape[1])]
        for j, c in enumerate(post):
            frame[c] = x1[:, j]
            types[c] = "continuous"
    if y is None:
        y = np.where(s == 1, 0.0, np.nan)
    y = np.where(s == 1, np.asarray(y, dtype=float), np.nan)
    if roles is None:
        roles = {r: cols for r in ("distance", "principal_score", "outcome_model", "balance")}
        if x1 is not None:
            roles["post_treatment"] = post
    return Dataset(frame, a, s, y, ColumnMeta(types, roles), ids)


@pytest.fixture(scope="session")
def nsw():
    return load_nsw()


@pytest.fixture(scope="session")
def nsw_model(nsw):
    return fit_em_monotonicity(nsw, accelerate=True)


@pytest.fixture(scope="session")
def nsw_spec(nsw, nsw_model):
    return DistanceSpec("mahalanobis_with_caliper", caliper=0.3, caliper_units="sd", score_model=nsw_model).bind(nsw)


@pytest.fixture(scope="session")
def nsw_sample(nsw, nsw_spec):
    return match(nsw, nsw_spec, target_arm=0, with_replacement=True)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
