"""Cross-fitted nuisance bundle assembly.

Two modes are supported:

* ``federated`` -- per-site censoring survival and propensity models trained
  fold-wise on own-site data; the target outcome model is cross-fitted within
  the target site, and a whole-target outcome model supplies survival
  predictions for source rows; density ratios come from pooled covariate
  discrimination or coarse summary tilting.
* ``ccod`` -- globally pooled outcome/censoring/propensity models plus a
  target-site membership propensity, all cross-fitted on the pooled sample.

Every prediction for an observation comes from a model whose training set
excluded that observation's fold; provenance tags record the mapping so the
contract can be audited.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .curves import SURVIVAL_FLOOR, TimeGrid
from .data import Dataset
from .errors import WrongBundleMode
from .folds import FoldAssignment, make_folds
from .models import (
    SiteCovariateSummary,
    coarse_ratio_or_fallback,
    fit_density_ratio_pooled,
    fit_logistic,
    fit_propensity,
    fit_survival_ensemble,
)
from .rng import substream

FEDERATED = "federated"
CCOD = "ccod"
POOLED_SHARING = "pooled"
COARSE_SHARING = "coarse"


@dataclass
class NuisanceBundle:
    """Out-of-fold nuisance predictions for every observation and arm."""

    grid: TimeGrid
    mode: str
    sharing: str
    eta_cap: float
    folds: FoldAssignment
    fold_of_row: np.ndarray
    # federated-mode slots (target-model survival, own-site censoring/propensity)
    s_tgt: dict = field(default_factory=dict)      # arm -> (n, g)
    g_own: dict = field(default_factory=dict)      # arm -> (n, g)
    pi1_own: np.ndarray | None = None              # (n,) P(A=1 | X, own site)
    omega: np.ndarray | None = None                # (n,) density ratio, 1 on target rows
    # ccod-mode slots
    s_bar: dict = field(default_factory=dict)
    g_bar: dict = field(default_factory=dict)
    pi1_bar: np.ndarray | None = None
    q0: np.ndarray | None = None                   # (n,) P(R=0 | X)
    # bookkeeping
    s_full_model: object = None
    clip_counts: dict = field(default_factory=dict)
    n_predictions: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)  # role -> (n,) model tag per row
    flags: list = field(default_factory=list)

    def require_mode(self, mode: str):
        if self.mode != mode:
            raise WrongBundleMode(f"bundle built in {self.mode!r} mode, {mode!r} required")

    def propensity(self, a: int, pooled=False) -> np.ndarray:
        pi1 = self.pi1_bar if pooled else self.pi1_own
        return pi1 if a == 1 else 1.0 - pi1

    def clip_fraction(self, key: str) -> float:
        n = self.n_predictions.get(key, 0)
        return self.clip_counts.get(key, 0) / n if n else 0.0

    def audit_cross_fitting(self, dataset: Dataset) -> bool:
        """Check that no row was predicted by a model trained on its own fold."""
        for role, tags in self.provenance.items():
            for i, tag in enumerate(tags):
                if tag is None:
                    continue
                held_out = tag[-1]
                if held_out != "full" and held_out != int(self.fold_of_row[i]):
                    return False
        return True


def _clip_track(bundle, key, values, lo, hi):
    clipped = np.clip(values, lo, hi)
    bundle.clip_counts[key] = bundle.clip_counts.get(key, 0) + int(np.sum((values < lo) | (values > hi)))
    bundle.n_predictions[key] = bundle.n_predictions.get(key, 0) + values.size
    return clipped


def build_nuisance_bundle(dataset, folds, grid, mode=FEDERATED, sharing=POOLED_SHARING,
                          seed=0, eta_cap=20.0, v_ens=3) -> NuisanceBundle:
    """Cross-fit all nuisance models and assemble the prediction bundle."""
    if isinstance(folds, int):
        folds = make_folds(dataset, folds, seed)
    bundle = NuisanceBundle(
        grid=grid, mode=mode, sharing=sharing, eta_cap=eta_cap, folds=folds,
        fold_of_row=folds.fold_of_rows(dataset),
    )
    if mode == FEDERATED:
        _build_federated(bundle, dataset, seed, v_ens)
    elif mode == CCOD:
        if sharing != POOLED_SHARING:
            raise WrongBundleMode("pooled-data estimation requires pooled sharing")
        _build_ccod(bundle, dataset, seed, v_ens)
    else:
        raise WrongBundleMode(f"unknown bundle mode {mode!r}")
    return bundle


def site_local_nuisances(x, a, y, delta, site, fold_ids, grid, seed, eta_cap=20.0, v_ens=3):
    """Own-site censoring survival and propensity, cross-fitted locally.

    This is the per-site building block shared by the centralized bundle and
    the federated site process, so both produce bit-identical predictions.
    Returns (g_matrices per arm, pi1 vector, clip counters, provenance tags).
    """
    n = y.size
    g = {arm: np.empty((n, len(grid))) for arm in (0, 1)}
    pi1 = np.empty(n)
    tags = {"g": [None] * n, "pi": [None] * n}
    clip = {"g": 0, "pi": 0, "g_n": 0, "pi_n": 0}
    m_folds = int(fold_ids.max()) + 1
    for m in range(m_folds):
        tr = fold_ids != m
        va = np.flatnonzero(fold_ids == m)
        if va.size == 0:
            continue
        cens = fit_survival_ensemble(
            x[tr], a[tr], y[tr], delta[tr], outcome="censoring",
            v_folds=v_ens, rng=substream(seed, "ens", site, m, "cens"), tau=float(grid.tau),
        )
        prop = fit_propensity(x[tr], a[tr])
        for arm in (0, 1):
            raw = cens.survival_matrix(x[va], arm, grid.points)
            lo = 1.0 / eta_cap
            clip["g"] += int(np.sum((raw < lo) | (raw > 1.0)))
            clip["g_n"] += raw.size
            g[arm][va] = np.clip(raw, lo, 1.0)
        raw_pi = prop.predict_clipped(x[va])
        lo = max(0.01, 1.0 / eta_cap)
        clip["pi"] += int(np.sum((raw_pi < lo) | (raw_pi > 1 - lo)))
        clip["pi_n"] += raw_pi.size
        pi1[va] = np.clip(raw_pi, lo, 1.0 - lo)
        for i in va:
            tags["g"][i] = ("g", site, m)
            tags["pi"][i] = ("pi", site, m)
    return g, pi1, clip, tags


def _build_federated(bundle, dataset, seed, v_ens):
    grid = bundle.grid
    n, g_len = dataset.n, len(grid)
    cap = bundle.eta_cap
    bundle.s_tgt = {arm: np.empty((n, g_len)) for arm in (0, 1)}
    bundle.g_own = {arm: np.empty((n, g_len)) for arm in (0, 1)}
    bundle.pi1_own = np.empty(n)
    bundle.omega = np.ones(n)
    prov_s = [None] * n
    prov_g = [None] * n
    prov_pi = [None] * n
    prov_w = [None] * n

    tgt_rows = dataset.site_rows(0)
    tgt_folds = bundle.folds.site_folds[0]
    x0, a0, y0, d0 = dataset.x[tgt_rows], dataset.a[tgt_rows], dataset.y[tgt_rows], dataset.delta[tgt_rows]

    # target site: cross-fitted outcome model plus own censoring/propensity
    for m in range(bundle.folds.m):
        tr = tgt_folds != m
        va_local = np.flatnonzero(tgt_folds == m)
        va = tgt_rows[va_local]
        if va.size == 0:
            continue
        surv = fit_survival_ensemble(
            x0[tr], a0[tr], y0[tr], d0[tr], outcome="event",
            v_folds=v_ens, rng=substream(seed, "ens", 0, m, "event"), tau=float(grid.tau),
        )
        for arm in (0, 1):
            raw = surv.survival_matrix(dataset.x[va], arm, grid.points)
            bundle.s_tgt[arm][va] = np.maximum(raw, SURVIVAL_FLOOR)
            bundle.clip_counts["s_floor"] = bundle.clip_counts.get("s_floor", 0) + int((raw < SURVIVAL_FLOOR).sum())
            bundle.n_predictions["s_floor"] = bundle.n_predictions.get("s_floor", 0) + raw.size
        for i in va:
            prov_s[i] = ("s", 0, m)

    g0, pi10, clip0, tags0 = site_local_nuisances(
        x0, a0, y0, d0, 0, tgt_folds, grid, seed, eta_cap=cap, v_ens=v_ens
    )
    for arm in (0, 1):
        bundle.g_own[arm][tgt_rows] = g0[arm]
    bundle.pi1_own[tgt_rows] = pi10
    bundle.clip_counts["g"] = bundle.clip_counts.get("g", 0) + clip0["g"]
    bundle.n_predictions["g"] = bundle.n_predictions.get("g", 0) + clip0["g_n"]
    bundle.clip_counts["pi"] = bundle.clip_counts.get("pi", 0) + clip0["pi"]
    bundle.n_predictions["pi"] = bundle.n_predictions.get("pi", 0) + clip0["pi_n"]
    for j, i in enumerate(tgt_rows):
        prov_g[i] = tags0["g"][j]
        prov_pi[i] = tags0["pi"][j]

    # whole-target outcome model, applied to source rows
    s_full = fit_survival_ensemble(
        x0, a0, y0, d0, outcome="event",
        v_folds=v_ens, rng=substream(seed, "ens", 0, "full", "event"), tau=float(grid.tau),
    )
    bundle.s_full_model = s_full

    target_summary = SiteCovariateSummary.from_rows(0, x0)
    source_sites = [int(k) for k in dataset.sites if k != 0]
    for k in source_sites:
        rows = dataset.site_rows(k)
        kf = bundle.folds.site_folds[k]
        xk, ak, yk, dk = dataset.x[rows], dataset.a[rows], dataset.y[rows], dataset.delta[rows]
        for arm in (0, 1):
            raw = s_full.survival_matrix(xk, arm, grid.points)
            bundle.s_tgt[arm][rows] = np.maximum(raw, SURVIVAL_FLOOR)
        for i in rows:
            prov_s[i] = ("s", 0, "full")
        gk, pik, clipk, tagsk = site_local_nuisances(
            xk, ak, yk, dk, k, kf, grid, seed, eta_cap=cap, v_ens=v_ens
        )
        for arm in (0, 1):
            bundle.g_own[arm][rows] = gk[arm]
        bundle.pi1_own[rows] = pik
        bundle.clip_counts["g"] += clipk["g"]
        bundle.n_predictions["g"] += clipk["g_n"]
        bundle.clip_counts["pi"] += clipk["pi"]
        bundle.n_predictions["pi"] += clipk["pi_n"]
        for j, i in enumerate(rows):
            prov_g[i] = tagsk["g"][j]
            prov_pi[i] = tagsk["pi"][j]

        if bundle.sharing == COARSE_SHARING:
            ratio = coarse_ratio_or_fallback(target_summary, SiteCovariateSummary.from_rows(k, xk), eta_cap=cap)
            if ratio.fallback:
                bundle.flags.append(f"coarse density ratio fell back to 1 for site {k}")
            raw_w = ratio.ratio_raw(xk)
            bundle.clip_counts["omega"] = bundle.clip_counts.get("omega", 0) + int(
                np.sum((raw_w < 1 / cap) | (raw_w > cap)))
            bundle.n_predictions["omega"] = bundle.n_predictions.get("omega", 0) + raw_w.size
            bundle.omega[rows] = np.clip(raw_w, 1 / cap, cap)
            for i in rows:
                prov_w[i] = ("omega", k, "full")
        else:
            for m in range(bundle.folds.m):
                va_local = np.flatnonzero(kf == m)
                if va_local.size == 0:
                    continue
                ratio = fit_density_ratio_pooled(x0[tgt_folds != m], xk[kf != m], eta_cap=cap)
                raw_w = ratio.ratio_raw(xk[va_local])
                bundle.clip_counts["omega"] = bundle.clip_counts.get("omega", 0) + int(
                    np.sum((raw_w < 1 / cap) | (raw_w > cap)))
                bundle.n_predictions["omega"] = bundle.n_predictions.get("omega", 0) + raw_w.size
                bundle.omega[rows[va_local]] = np.clip(raw_w, 1 / cap, cap)
                for i in rows[va_local]:
                    prov_w[i] = ("omega", k, m)

    bundle.provenance = {"s": prov_s, "g": prov_g, "pi": prov_pi, "omega": prov_w}


def _build_ccod(bundle, dataset, seed, v_ens):
    grid = bundle.grid
    n, g_len = dataset.n, len(grid)
    cap = bundle.eta_cap
    bundle.s_bar = {arm: np.empty((n, g_len)) for arm in (0, 1)}
    bundle.g_bar = {arm: np.empty((n, g_len)) for arm in (0, 1)}
    bundle.pi1_bar = np.empty(n)
    bundle.q0 = np.empty(n)
    prov = [None] * n

    fold_of_row = bundle.fold_of_row
    is_target = (dataset.r == 0).astype(float)
    for m in range(bundle.folds.m):
        tr = fold_of_row != m
        va = np.flatnonzero(fold_of_row == m)
        if va.size == 0:
            continue
        surv = fit_survival_ensemble(
            dataset.x[tr], dataset.a[tr], dataset.y[tr], dataset.delta[tr], outcome="event",
            v_folds=v_ens, rng=substream(seed, "ens", 0, m, "event"), tau=float(grid.tau),
        )
        cens = fit_survival_ensemble(
            dataset.x[tr], dataset.a[tr], dataset.y[tr], dataset.delta[tr], outcome="censoring",
            v_folds=v_ens, rng=substream(seed, "ens", 0, m, "cens"), tau=float(grid.tau),
        )
        prop = fit_propensity(dataset.x[tr], dataset.a[tr])
        memb = fit_logistic(dataset.x[tr], is_target[tr])
        for arm in (0, 1):
            raw_s = surv.survival_matrix(dataset.x[va], arm, grid.points)
            bundle.s_bar[arm][va] = np.maximum(raw_s, SURVIVAL_FLOOR)
            raw_g = cens.survival_matrix(dataset.x[va], arm, grid.points)
            bundle.g_bar[arm][va] = _clip_track(bundle, "g_bar", raw_g, 1 / cap, 1.0)
        lo = max(0.01, 1.0 / cap)
        bundle.pi1_bar[va] = _clip_track(bundle, "pi_bar", prop.predict_clipped(dataset.x[va]), lo, 1 - lo)
        bundle.q0[va] = _clip_track(bundle, "q0", memb.predict(dataset.x[va]), 1 / cap, 1.0)
        for i in va:
            prov[i] = ("pooled", 0, m)
    bundle.provenance = {"pooled": prov}
