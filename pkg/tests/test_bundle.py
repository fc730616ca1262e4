import numpy as np
import pytest

from survfed.bundle import CCOD, FEDERATED, build_nuisance_bundle
from survfed.curves import TimeGrid
from survfed.errors import InvalidFoldCount, WrongBundleMode
from survfed.folds import make_folds
from survfed.simbench import ScenarioSpec, gen_dataset, propensity_true

GRID = TimeGrid.regular(100.0, 2.0)


def small_dataset(seed=3, n0=60, nk=80, scenario="homogeneous", sites=3):
    return gen_dataset(ScenarioSpec(scenario, k_sites=sites, n0=n0, n_source=nk), seed)


def test_fold_balance_and_determinism():
    ds = small_dataset()
    f1 = make_folds(ds, 4, seed=7)
    f2 = make_folds(ds, 4, seed=7)
    for k, folds in f1.site_folds.items():
        counts = np.bincount(folds, minlength=4)
        assert counts.max() - counts.min() <= 1
        assert np.array_equal(folds, f2.site_folds[k])
    f3 = make_folds(ds, 4, seed=8)
    assert any(not np.array_equal(f1.site_folds[k], f3.site_folds[k]) for k in f1.site_folds)


def test_fold_balance_odd_size():
    ds = small_dataset(n0=11, nk=11)
    folds = make_folds(ds, 2, seed=1)
    counts = np.bincount(folds.site_folds[0])
    assert sorted(counts.tolist()) == [5, 6]


def test_fold_count_out_of_range():
    ds = small_dataset(n0=10, nk=10)
    with pytest.raises(InvalidFoldCount):
        make_folds(ds, 6, seed=0)
    with pytest.raises(InvalidFoldCount):
        make_folds(ds, 1, seed=0)


def test_federated_bundle_shapes_and_ranges():
    ds = small_dataset()
    bundle = build_nuisance_bundle(ds, 3, GRID, mode=FEDERATED, seed=5)
    n, g = ds.n, len(GRID)
    for arm in (0, 1):
        assert bundle.s_tgt[arm].shape == (n, g)
        assert bundle.g_own[arm].shape == (n, g)
        assert bundle.g_own[arm].min() >= 1 / 20 - 1e-12
        assert bundle.g_own[arm].max() <= 1.0 + 1e-12
        assert bundle.s_tgt[arm].min() > 0
    assert np.all((bundle.pi1_own >= 0.05) & (bundle.pi1_own <= 0.95))
    assert np.all((bundle.omega >= 1 / 20) & (bundle.omega <= 20))
    assert np.all(bundle.omega[ds.site_rows(0)] == 1.0)


def test_cross_fitting_audit():
    ds = small_dataset()
    bundle = build_nuisance_bundle(ds, 3, GRID, mode=FEDERATED, seed=5)
    assert bundle.audit_cross_fitting(ds)
    # every target-row prediction must come from a model that excluded its fold
    for i in ds.site_rows(0):
        tag = bundle.provenance["s"][i]
        assert tag[1] == 0 and tag[2] == bundle.fold_of_row[i]
    for k in (1, 2):
        for i in ds.site_rows(k):
            assert bundle.provenance["s"][i] == ("s", 0, "full")
            assert bundle.provenance["g"][i][2] == bundle.fold_of_row[i]


def test_bundle_determinism():
    ds = small_dataset()
    b1 = build_nuisance_bundle(ds, 3, GRID, mode=FEDERATED, seed=5)
    b2 = build_nuisance_bundle(ds, 3, GRID, mode=FEDERATED, seed=5)
    assert np.array_equal(b1.s_tgt[1], b2.s_tgt[1])
    assert np.array_equal(b1.pi1_own, b2.pi1_own)
    assert np.array_equal(b1.omega, b2.omega)


def test_clip_fraction_small_on_homogeneous_data():
    ds = gen_dataset(ScenarioSpec("homogeneous", n0=300, n_source=300), 17)
    bundle = build_nuisance_bundle(ds, 5, TimeGrid.regular(200.0, 2.0), mode=FEDERATED, seed=17)
    for key in ("g", "pi", "omega"):
        assert bundle.clip_fraction(key) < 0.05, key


def test_propensity_predictions_match_truth_on_average():
    ds = gen_dataset(ScenarioSpec("homogeneous", n0=300, n_source=300), 23)
    bundle = build_nuisance_bundle(ds, 5, GRID, mode=FEDERATED, seed=23)
    truth = propensity_true(ds.x)
    assert np.mean(np.abs(bundle.pi1_own - truth)) < 0.1


def test_ccod_bundle_slots_and_mode_guard():
    ds = small_dataset()
    bundle = build_nuisance_bundle(ds, 3, GRID, mode=CCOD, seed=5)
    assert bundle.q0 is not None and bundle.pi1_bar is not None
    assert np.all((bundle.q0 >= 0.05) & (bundle.q0 <= 1.0))
    with pytest.raises(WrongBundleMode):
        bundle.require_mode(FEDERATED)
    with pytest.raises(WrongBundleMode):
        build_nuisance_bundle(ds, 3, GRID, mode=CCOD, sharing="coarse", seed=5)


def test_single_site_bundle_has_no_ratio_models():
    ds = small_dataset().subset(range(60))  # target rows only
    assert ds.n_sites == 1
    bundle = build_nuisance_bundle(ds, 3, GRID, mode=FEDERATED, seed=5)
    assert np.all(bundle.omega == 1.0)
    assert bundle.s_tgt[0].shape[0] == ds.n


def test_coarse_sharing_omega_is_site_constant_model():
    ds = small_dataset(scenario="covariate_shift")
    pooled = build_nuisance_bundle(ds, 3, GRID, mode=FEDERATED, sharing="pooled", seed=5)
    coarse = build_nuisance_bundle(ds, 3, GRID, mode=FEDERATED, sharing="coarse", seed=5)
    rows = ds.site_rows(2)
    # both transport toward the target; directions should broadly agree
    corr = np.corrcoef(np.log(pooled.omega[rows]), np.log(coarse.omega[rows]))[0, 1]
    assert corr > 0.55
