import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sacematch.estimators import estimate_regression, fit_outcome_model
from sacematch.matching import DistanceSpec, match
from sacematch.principal_score import PrincipalScoreModel
from sacematch.sensitivity import (
    DEFAULT_ALPHA0,
    DEFAULT_ALPHA1,
    default_xi_grid,
    sweep_monotonicity,
    sweep_ppi,
)

from conftest import make_dataset


@pytest.fixture(scope="module")
def nsw_ppi(nsw, nsw_sample, nsw_model):
    return sweep_ppi(nsw, nsw_sample, nsw_model)


@pytest.fixture(scope="module")
def nsw_mono(nsw, nsw_sample):
    return sweep_monotonicity(nsw, nsw_sample)


def test_default_grids(nsw):
    assert len(DEFAULT_ALPHA1) == 16 and DEFAULT_ALPHA1[0] == 0.5 and DEFAULT_ALPHA1[-1] == 2.0
    assert DEFAULT_ALPHA0 == (0.5, 0.75, 1.0, 1.25, 1.5, 1.75, 2.0)
    grid = default_xi_grid(0.696, 0.774)
    assert grid[:5] == (0.0, 0.1, 0.2, 0.3, 0.4)
    assert round(grid[-1], 2) == 0.48 and len(grid) == 6


def test_ppi_alpha1_one_is_base(nsw, nsw_sample, nsw_ppi):
    base = estimate_regression(fit_outcome_model(nsw, nsw_sample), nsw_sample, nsw)
    assert nsw_ppi.at(alpha1=1.0).estimate == nsw_ppi.base.estimate
    assert nsw_ppi.base.estimate == pytest.approx(base.estimate, rel=1e-12)


def test_ppi_constant_when_all_always_survivors(nsw, nsw_sample):
    # Protected logit pinned far below the always-survivor logit.
    m = PrincipalScoreModel("monotonicity", np.array([[50.0] + [0.0] * 6, [0.0] * 7]),
                            tuple(nsw.meta.role("principal_score")))
    est = sweep_ppi(nsw, nsw_sample, m).to_frame()["estimate"].to_numpy()
    np.testing.assert_allclose(est, est[0], rtol=1e-12)


def test_ppi_rejects_cpsr_model(nsw, nsw_sample):
    m = PrincipalScoreModel("cpsr", np.zeros((2, 7)), tuple(nsw.meta.role("principal_score")), xi=0.2)
    with pytest.raises(ValueError, match="monotonicity"):
        sweep_ppi(nsw, nsw_sample, m)


def test_mono_reductions(nsw_mono):
    base = nsw_mono.base.estimate
    for p in nsw_mono.points:
        if p.xi == 0 or p.alpha0 == 1:
            assert p.report.estimate == base
            assert p.report.se == nsw_mono.base.se


def test_mono_out_of_bounds(nsw, nsw_sample):
    with pytest.raises(ValueError, match="outside the bounds"):
        sweep_monotonicity(nsw, nsw_sample, xi_values=[0.2, 0.7])


def test_refit_requires_score_spec(nsw, nsw_sample):
    with pytest.raises(ValueError, match="score model"):
        sweep_monotonicity(nsw, nsw_sample, xi_values=[0.1], refit_em_per_xi=True,
                           spec=DistanceSpec("mahalanobis"))


def test_frame_shapes(nsw_ppi, nsw_mono):
    assert list(nsw_ppi.to_frame().columns) == ["alpha1", "estimate", "se", "ci_lo", "ci_hi"]
    assert len(nsw_ppi.to_frame()) == 16
    assert len(nsw_mono.to_frame()) == 6 * 7


def _positive_outcome_data(seed=0, n=300):
    rng = np.random.default_rng(seed)
    x = rng.uniform(1, 3, size=n)
    a = rng.integers(0, 2, n)
    s = (rng.random(n) < 0.8).astype(int)
    y = 5 + x + a + rng.normal(scale=0.5, size=n)
    return make_dataset(x, a, s, y=y)


def test_mono_nondecreasing_in_alpha0():
    d = _positive_outcome_data()
    s = match(d, DistanceSpec("mahalanobis"))
    m = fit_outcome_model(d, s)
    assert np.all(m.predict(0, d.x(["x1"])[s.target_rows]) > 0)
    g = sweep_monotonicity(d, s, model=m, xi_values=[0.1, 0.2], alpha0_values=np.linspace(0.5, 3, 11))
    f = g.to_frame()
    for _, grp in f.groupby("xi"):
        assert np.all(np.diff(grp.sort_values("alpha0")["estimate"].to_numpy()) >= 0)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.5, 2.0))
def test_ppi_continuity(a1):
    d = _positive_outcome_data(1)
    s = match(d, DistanceSpec("mahalanobis"))
    m = PrincipalScoreModel("monotonicity", np.array([[0.3, 0.5], [-1.0, 0.0]]), ("x1",))
    h = 1e-6
    g = sweep_ppi(d, s, m, alpha1_values=[a1, a1 + h]).to_frame()["estimate"].to_numpy()
    # The estimate is smooth in alpha1 with derivative bounded by the outcome scale.
    assert abs(g[1] - g[0]) < 20 * h


def test_ppi_decreasing_with_positive_outcomes():
    d = _positive_outcome_data(2)
    s = match(d, DistanceSpec("mahalanobis"))
    m = PrincipalScoreModel("monotonicity", np.array([[0.3, 0.5], [-1.0, 0.0]]), ("x1",))
    est = sweep_ppi(d, s, m).to_frame()["estimate"].to_numpy()
    assert np.all(np.diff(est) < 0)


@pytest.mark.parametrize("bad", [[0.0], [-1.0]])
def test_alpha_must_be_positive(nsw, nsw_sample, nsw_model, bad):
    with pytest.raises(ValueError, match="positive"):
        sweep_ppi(nsw, nsw_sample, nsw_model, alpha1_values=bad)
    with pytest.raises(ValueError, match="positive"):
        sweep_monotonicity(nsw, nsw_sample, xi_values=[0.1], alpha0_values=bad)
