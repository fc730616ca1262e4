import numpy as np
import pytest

from survfed.models import (
    SiteCovariateSummary,
    coarse_ratio_or_fallback,
    fit_density_ratio_coarse,
    fit_density_ratio_pooled,
    fit_logistic,
    fit_propensity,
    fit_survival_ensemble,
)
from survfed.errors import CoarseRatioFailure, InvalidInput
from survfed.rng import substream


def test_propensity_intercept_only():
    rng = substream(1, "prop")
    n = 2000
    x = rng.normal(size=(n, 3))
    a = (rng.uniform(size=n) < 0.6).astype(int)
    model = fit_propensity(x, a)
    preds = model.predict_clipped(x)
    assert abs(preds.mean() - 0.6) < 0.05


def test_propensity_single_arm_degenerate():
    x = np.random.default_rng(0).normal(size=(50, 2))
    model = fit_propensity(x, np.ones(50, dtype=int))
    assert model.degenerate
    assert np.all(model.predict_clipped(x) == 0.99)


def test_propensity_separable_data_is_clipped():
    x = np.linspace(-3, 3, 200)[:, None]
    a = (x[:, 0] > 0).astype(int)
    model = fit_propensity(x, a)
    preds = model.predict_clipped(x)
    assert preds.min() >= 0.01 and preds.max() <= 0.99


def test_propensity_beats_intercept_only_on_benchmark_covariates():
    # the benchmark's treatment probability is a smooth function of the
    # covariates; a linear logit must achieve lower held-out log-loss than an
    # intercept-only model
    from survfed.simbench import _draw_covariates, propensity_true, scenario_knobs

    rng = substream(21, "plogit")
    x = _draw_covariates(scenario_knobs("homogeneous", 0), 4000, rng)
    a = (rng.uniform(size=4000) < propensity_true(x)).astype(int)
    tr, va = slice(0, 2000), slice(2000, 4000)
    model = fit_propensity(x[tr], a[tr])
    p = model.predict_clipped(x[va])
    ll_model = -np.mean(a[va] * np.log(p) + (1 - a[va]) * np.log(1 - p))
    p0 = np.clip(a[tr].mean(), 1e-6, 1 - 1e-6)
    ll_const = -np.mean(a[va] * np.log(p0) + (1 - a[va]) * np.log(1 - p0))
    assert ll_model <= ll_const


def test_logistic_recovers_known_coefficients():
    rng = substream(2, "logit")
    n = 20000
    x = rng.normal(size=(n, 2))
    logit = -0.5 + 1.2 * x[:, 0] - 0.7 * x[:, 1]
    yv = (rng.uniform(size=n) < 1 / (1 + np.exp(-logit))).astype(float)
    model = fit_logistic(x, yv)
    assert np.allclose(model.coef, [-0.5, 1.2, -0.7], atol=0.08)


def test_density_ratio_identical_distributions_near_one():
    rng = substream(3, "dr")
    tx = rng.normal(size=(2000, 2))
    sx = rng.normal(size=(2000, 2))
    ratio = fit_density_ratio_pooled(tx, sx)
    w = ratio.ratio(sx)
    assert 0.9 < w.mean() < 1.1


def test_density_ratio_gaussian_shift_matches_analytic():
    # N(mu, I) over N(0, I): log ratio is mu'x - |mu|^2/2
    rng = substream(4, "dr2")
    n = 5000
    mu = np.array([0.8, -0.4])
    tx = rng.normal(size=(n, 2)) + mu
    sx = rng.normal(size=(n, 2))
    ratio = fit_density_ratio_pooled(tx, sx)
    slope = ratio.logistic.coef[1:]
    assert np.all(np.abs(slope - mu) / np.abs(mu) < 0.12)


def test_density_ratio_reciprocity():
    rng = substream(5, "dr3")
    tx = rng.normal(size=(800, 2)) + 0.3
    sx = rng.normal(size=(800, 2))
    fwd = fit_density_ratio_pooled(tx, sx)
    bwd = fit_density_ratio_pooled(sx, tx)
    x = rng.normal(size=(200, 2))
    prod = fwd.ratio_raw(x) * bwd.ratio_raw(x)
    assert np.max(np.abs(prod - 1.0)) < 1e-6


def test_density_ratio_dim_mismatch():
    with pytest.raises(InvalidInput):
        fit_density_ratio_pooled(np.ones((5, 2)), np.ones((5, 3)))


def test_coarse_tilt_identity_when_means_match():
    s = SiteCovariateSummary(0, 100, np.array([1.0, 2.0]), np.eye(2))
    t = SiteCovariateSummary(1, 100, np.array([1.0, 2.0]), np.eye(2) * 2)
    ratio = fit_density_ratio_coarse(s, t)
    assert np.allclose(ratio.beta, 0.0) and ratio.alpha == 0.0
    assert np.allclose(ratio.ratio(np.array([[5.0, -3.0]])), 1.0)


def test_coarse_tilt_closed_form_1d():
    source = SiteCovariateSummary(1, 500, np.array([0.0]), np.array([[1.0]]))
    target = SiteCovariateSummary(0, 500, np.array([0.5]), np.array([[1.0]]))
    ratio = fit_density_ratio_coarse(target, source)
    assert ratio.beta[0] == pytest.approx(0.5)
    assert ratio.alpha == pytest.approx(-0.125)


def test_coarse_tilt_singular_covariance_fails_and_falls_back():
    source = SiteCovariateSummary(1, 10, np.zeros(2), np.zeros((2, 2)))
    target = SiteCovariateSummary(0, 10, np.array([1.0, 0.0]), np.eye(2))
    with pytest.raises(CoarseRatioFailure):
        fit_density_ratio_coarse(target, source)
    fallback = coarse_ratio_or_fallback(target, source)
    assert fallback.fallback
    assert np.all(fallback.ratio(np.ones((3, 2))) == 1.0)


def test_coarse_vs_pooled_agree_on_gaussian_shift():
    rng = substream(6, "dr4")
    n = 4000
    tx = rng.normal(size=(n, 2)) * 0.9 + np.array([0.5, -0.2])
    sx = rng.normal(size=(n, 2))
    pooled = fit_density_ratio_pooled(tx, sx)
    coarse = fit_density_ratio_coarse(
        SiteCovariateSummary.from_rows(0, tx), SiteCovariateSummary.from_rows(1, sx)
    )
    w_pooled = pooled.ratio(sx)
    w_coarse = coarse.ratio(sx)
    corr = np.corrcoef(w_pooled, w_coarse)[0, 1]
    assert corr > 0.8


def test_summary_json_roundtrip():
    s = SiteCovariateSummary.from_rows(2, np.random.default_rng(0).normal(size=(40, 3)))
    back = SiteCovariateSummary.from_json(s.to_json())
    assert back.site == 2 and back.n == 40
    assert np.array_equal(back.mean, s.mean)
    assert np.array_equal(back.cov, s.cov)


# --- survival ensemble ----------------------------------------------------


def _cox_dgp(n, seed, effect=1.5):
    rng = substream(seed, "ens")
    x = rng.normal(size=(n, 2))
    a = rng.integers(0, 2, n)
    rate = 0.3 * np.exp(effect * x[:, 0] - 0.5 * a)
    t = rng.exponential(1.0 / rate)
    c = rng.exponential(6.0, size=n)
    return x, a, np.minimum(t, c), (t <= c).astype(int)


def test_ensemble_selects_cox_under_strong_covariate_effect():
    x, a, y, delta = _cox_dgp(500, 11)
    fit = fit_survival_ensemble(x, a, y, delta, rng=substream(11, "cv"))
    assert fit.tag == "cox"


def test_ensemble_near_tie_under_null_effect():
    x, a, y, delta = _cox_dgp(800, 12, effect=0.0)
    fit = fit_survival_ensemble(x, a, y, delta, rng=substream(12, "cv"))
    best = min(fit.cv_scores.values())
    assert fit.cv_scores[fit.tag] <= best * 1.05


def test_ensemble_single_candidate_passthrough():
    from survfed.models import _fit_marginal_km

    x, a, y, delta = _cox_dgp(100, 13)
    only = fit_survival_ensemble(x, a, y, delta, candidates=[("km", _fit_marginal_km)])
    assert only.tag == "km"


def test_ensemble_no_events_degenerate_flag():
    x, a, y, _ = _cox_dgp(60, 14)
    fit = fit_survival_ensemble(x, a, y, np.zeros(60, dtype=int), rng=substream(14, "cv"))
    assert fit.degenerate and fit.tag == "km"
    surv = fit.survival_matrix(x[:5], 1, np.array([0.0, 1.0]))
    assert np.all(surv == 1.0)


def test_ensemble_censoring_outcome_fits_censoring_curve():
    x, a, y, delta = _cox_dgp(300, 15)
    fit = fit_survival_ensemble(x, a, y, delta, outcome="censoring", rng=substream(15, "cv"))
    surv = fit.survival_matrix(x, 1, np.array([0.0]))
    assert np.all(surv == 1.0)  # censoring survival starts at 1
