import numpy as np
import pytest

from survfed.cox import (
    breslow_partial_loglik,
    cox_fit,
    cox_fit_design,
    predict_conditional_survival,
)
from survfed.curves import TimeGrid, nelson_aalen_fit
from survfed.data import Dataset
from survfed.errors import DegenerateFit, InvalidInput, SingularDesign


def grid_search_beta(z, y, e, lo=-10.0, hi=10.0, step=1e-3):
    grid = np.arange(lo, hi + step, step)
    lls = np.array([breslow_partial_loglik(np.array([b]), z, y, e) for b in grid])
    return grid[np.argmax(lls)]


def test_constant_covariate_gets_zero_coefficient():
    y = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    e = np.array([1, 0, 1, 1, 0])
    model = cox_fit_design(np.ones((5, 1)), y, e)
    assert model.beta[0] == 0.0
    na = nelson_aalen_fit(times=y, events=e)
    assert np.allclose(model.baseline_cumhaz.evaluate(y), na.evaluate(y), atol=1e-12)


def test_matches_partial_likelihood_grid_search():
    rng = np.random.default_rng(42)
    checked = 0
    while checked < 5:
        n = 6
        z = rng.normal(size=(n, 1))
        y = rng.exponential(size=n) + 0.05
        e = np.ones(n)
        coarse = grid_search_beta(z, y, e, step=1e-2)
        if abs(coarse) > 8:  # monotone likelihood, no finite optimum
            continue
        fine = grid_search_beta(z, y, e, lo=coarse - 0.05, hi=coarse + 0.05, step=1e-5)
        model = cox_fit_design(z, y, e)
        assert abs(model.beta[0] - fine) < 2e-4
        assert model.grad_norm < 1e-8
        checked += 1


def test_local_optimality_of_fit():
    rng = np.random.default_rng(7)
    n = 60
    z = rng.normal(size=(n, 2))
    y = rng.exponential(np.exp(-0.5 * z[:, 0]))
    e = rng.integers(0, 2, size=n) | 1  # mostly events
    model = cox_fit_design(z, y, e)
    ll_hat = breslow_partial_loglik(model.beta, z, y, e)
    for _ in range(1000):
        pert = model.beta + rng.uniform(-0.1, 0.1, size=2)
        assert breslow_partial_loglik(pert, z, y, e) <= ll_hat + 1e-10


def test_perturbation_decreases_loglik_in_each_coordinate():
    rng = np.random.default_rng(3)
    z = rng.normal(size=(40, 1))
    y = rng.exponential(np.exp(-0.8 * z[:, 0]))
    model = cox_fit_design(z, y, np.ones(40))
    ll_hat = breslow_partial_loglik(model.beta, z, y, np.ones(40))
    for sign in (-1, 1):
        assert breslow_partial_loglik(model.beta + sign * 1e-3, z, y, np.ones(40)) < ll_hat


def test_no_events_raises_degenerate():
    with pytest.raises(DegenerateFit):
        cox_fit_design(np.random.default_rng(0).normal(size=(10, 1)), np.arange(1, 11.0), np.zeros(10))


def test_collinear_design_raises():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(20, 1))
    z = np.hstack([x, 2 * x])
    with pytest.raises(SingularDesign):
        cox_fit_design(z, rng.exponential(size=20), np.ones(20))


def test_cox_fit_on_observations_censoring_outcome():
    rng = np.random.default_rng(5)
    n = 80
    x = rng.normal(size=(n, 2))
    ds = Dataset(x=x, a=rng.integers(0, 2, n), y=rng.exponential(size=n),
                 delta=rng.integers(0, 2, n), r=np.zeros(n, dtype=int))
    ev = cox_fit(ds, outcome="event")
    cen = cox_fit(ds, outcome="censoring")
    assert ev.n_events == ds.delta.sum()
    assert cen.n_events == (1 - ds.delta).sum()
    assert ev.feature_spec == ("x1", "x2", "a")


def test_predict_conditional_survival_null_model():
    rng = np.random.default_rng(11)
    n = 50
    z = np.zeros((n, 1))
    y = rng.exponential(size=n)
    model = cox_fit_design(np.hstack([z, rng.integers(0, 2, (n, 1))]), y, np.ones(n))
    grid = TimeGrid.regular(3.0, 0.5)
    s0 = predict_conditional_survival(model, [0.0], 0, grid)
    assert s0.evaluate(0.0) <= 1.0
    lam0 = model.baseline_cumhaz.evaluate(grid.points)
    assert np.allclose(s0.values, np.exp(-lam0 * np.exp(model.beta[1] * 0.0)), atol=1e-12)


def test_linear_predictor_scaling_identity():
    rng = np.random.default_rng(13)
    n = 60
    z = np.column_stack([rng.normal(size=n), rng.integers(0, 2, n)])
    model = cox_fit_design(z, rng.exponential(size=n), np.ones(n))
    grid = TimeGrid.regular(2.0, 0.25)
    x = np.array([0.7])
    s1 = predict_conditional_survival(model, x, 1, grid)
    # doubling the linear predictor scales log-survival by exp(delta lp)
    lp = model.beta @ np.array([0.7, 1.0])
    doubled = model.survival(np.array([[1.4, 2.0]]), grid.points)[0]
    mask = s1.values > 1e-14
    assert np.allclose(np.log(doubled[mask]), np.exp(lp) * np.log(s1.values[mask]), atol=1e-9)


def test_dimension_mismatch_raises():
    rng = np.random.default_rng(2)
    model = cox_fit_design(rng.normal(size=(30, 2)), rng.exponential(size=30), np.ones(30))
    with pytest.raises(InvalidInput):
        predict_conditional_survival(model, [1.0, 2.0, 3.0], 1, TimeGrid.regular(1.0, 0.5))
