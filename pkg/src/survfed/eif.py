"""Influence-function calculus: the weighted martingale residual, the three
one-step estimators (target-only, pooled-outcome, transported site-specific),
their per-observation influence values, variances and site discrepancies.

The martingale residual of an observation at horizon t is

    H_t = I(Y <= t, event) / (S(Y) G(Y-))
          - sum_{u <= t ^ Y} dLambda(u) / (S(u) G(u-)),

where the sum runs over the jump points of the cumulative hazard implied by
S. Denominators pair the post-jump (right-continuous) survival value S(u)
with the left limit G(u-) of the censoring survival; under that pairing H has
exact conditional mean zero in the discrete model, which the tests assert.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .bundle import CCOD, FEDERATED, NuisanceBundle
from .curves import SURVIVAL_FLOOR, CurveKind, StepCurve, TimeGrid, survival_to_cumhaz
from .data import Dataset
from .errors import (
    EmptySite,
    EmptyTable,
    EmptyTarget,
    InvalidInput,
    PositivityViolation,
)

TGT = "TGT"
CCOD_EST = "CCOD"


def site_estimator(k: int) -> str:
    return f"SITE{k}"


@dataclass
class HStruct:
    """Precomputed pieces of the martingale residual, reusable across horizons."""

    grid: TimeGrid
    y: np.ndarray
    event_term: np.ndarray   # delta / (S(Y) G(Y-)), without the I(Y <= t) mask
    W: np.ndarray            # (n, g) running integral at each grid point
    y_idx: np.ndarray        # largest grid index with point <= Y

    def h_at(self, t: float) -> np.ndarray:
        jt = int(self.grid.index_leq(t))
        upto = np.minimum(jt, self.y_idx)
        rows = np.arange(self.y.size)
        integral = np.where(upto >= 0, self.W[rows, np.maximum(upto, 0)], 0.0)
        return self.event_term * (self.y <= t) - integral


def build_h_struct(y, delta, s_mat, g_mat, grid: TimeGrid) -> HStruct:
    """Vectorized residual pieces for per-row survival/censoring matrices."""
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=float)
    s = np.maximum(np.asarray(s_mat, dtype=float), SURVIVAL_FLOOR)
    g = np.maximum(np.asarray(g_mat, dtype=float), SURVIVAL_FLOOR)
    n = y.size
    ones = np.ones((n, 1))
    s_prev = np.hstack([ones, s[:, :-1]])
    g_prev = np.hstack([ones, g[:, :-1]])
    dlam = (s_prev - s) / s_prev
    w = np.cumsum(dlam / (s * g_prev), axis=1)

    y_idx = grid.index_leq(y)
    rows = np.arange(n)
    safe_idx = np.maximum(y_idx, 0)
    on_grid = (y_idx >= 0) & (grid.points[safe_idx] == y)
    s_at_y = np.where(y_idx >= 0, s[rows, safe_idx], 1.0)
    g_left = np.where(y_idx >= 0, np.where(on_grid, g_prev[rows, safe_idx], g[rows, safe_idx]), 1.0)
    event_term = delta / (s_at_y * g_left)
    return HStruct(grid=grid, y=y, event_term=event_term, W=w, y_idx=y_idx)


def h_functional(y, delta, s_curve: StepCurve, g_curve: StepCurve, t: float,
                 lambda_curve: StepCurve = None, floor=SURVIVAL_FLOOR) -> float:
    """Martingale residual for a single observation from explicit curves.

    ``lambda_curve`` defaults to the cumulative hazard implied by
    ``s_curve``; when supplied it must live on the same grid. Raises
    ``PositivityViolation`` if a denominator falls below the floor before
    t ^ Y.
    """
    if s_curve.grid.points.shape != g_curve.grid.points.shape or np.any(
        s_curve.grid.points != g_curve.grid.points
    ):
        raise InvalidInput("survival and censoring curves must share a grid")
    grid = s_curve.grid
    if lambda_curve is None:
        lambda_curve = survival_to_cumhaz(s_curve)
    elif lambda_curve.kind is not CurveKind.CUM_HAZARD:
        raise InvalidInput("lambda_curve must be a cumulative hazard")
    elif lambda_curve.grid.points.shape != grid.points.shape or np.any(
        lambda_curve.grid.points != grid.points
    ):
        raise InvalidInput("hazard curve must share the survival grid")

    y, delta, t = float(y), float(delta), float(t)
    s_vals = s_curve.values
    g_prev = np.concatenate(([1.0], g_curve.values[:-1]))
    upto_idx = int(grid.index_leq(min(t, y)))
    if upto_idx >= 0:
        lo = min(s_vals[: upto_idx + 1].min(), g_curve.values[: upto_idx + 1].min())
        if lo < floor:
            raise PositivityViolation(f"nuisance below floor {floor:g} on [0, t^Y]")
    jumps = lambda_curve.jumps()
    integral = 0.0
    if upto_idx >= 0:
        den = np.maximum(s_vals[: upto_idx + 1], floor) * np.maximum(g_prev[: upto_idx + 1], floor)
        integral = float(np.sum(jumps[: upto_idx + 1] / den))
    event = 0.0
    if delta == 1 and y <= t:
        s_at_y = max(float(s_curve.evaluate(y)), floor)
        g_left = max(float(g_curve.left_limit(y)), floor)
        event = 1.0 / (s_at_y * g_left)
    return event - integral


@dataclass
class CellComponents:
    """Structural pieces of one (t, a) cell used by the federated machinery.

    ``anchor`` and ``xi01`` are target-row vectors; ``aug`` maps each source
    site to its augmentation-term vector (site-row order).
    """

    t: float
    a: int
    n: int
    anchor: np.ndarray
    xi01: np.ndarray
    aug: dict


@dataclass
class CellSlice:
    theta: float
    phi: np.ndarray
    phi_centered: np.ndarray


@dataclass
class InfluenceTable:
    """Per-observation influence values per estimator and (t, a) cell."""

    times: tuple
    arms: tuple
    estimators: tuple
    n: int
    site_of_row: np.ndarray
    cells: dict = field(default_factory=dict)        # (t, a) -> {estimator: CellSlice}
    components: dict = field(default_factory=dict)   # (t, a) -> CellComponents

    def slice(self, estimator: str, t: float, a: int) -> CellSlice:
        cell = self.cells.get((float(t), int(a)))
        if cell is None or estimator not in cell:
            raise EmptyTable(f"no slice for {estimator} at (t={t}, a={a})")
        return cell[estimator]

    def theta(self, estimator: str, t: float, a: int) -> float:
        return self.slice(estimator, t, a).theta

    def export_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["i", "site", "estimator", "t", "a", "phi_uncentered", "phi_centered"])
            for (t, a), cell in sorted(self.cells.items()):
                for est, sl in sorted(cell.items()):
                    for i in range(self.n):
                        writer.writerow([
                            i, int(self.site_of_row[i]), est, repr(float(t)), int(a),
                            repr(float(sl.phi[i])), repr(float(sl.phi_centered[i])),
                        ])


class EifEngine:
    """Builds influence values on demand from a nuisance bundle.

    Heavy per-arm precomputations (running martingale integrals) happen once;
    each (t, a) cell is then a cheap O(n) assembly, which keeps dense time
    grids affordable.
    """

    def __init__(self, bundle: NuisanceBundle, dataset: Dataset):
        self.bundle = bundle
        self.data = dataset
        self.n = dataset.n
        self.p_site = {int(k): dataset.site_size(int(k)) / dataset.n for k in dataset.sites}
        self.source_sites = tuple(int(k) for k in dataset.sites if k != 0)
        if 0 not in self.p_site:
            raise EmptyTarget("dataset has no target-site rows")
        self._h = {}
        self._jt_cache = {}

    def _h_struct(self, a: int, flavor: str) -> HStruct:
        key = (a, flavor)
        if key not in self._h:
            b = self.bundle
            if flavor == "own":
                b.require_mode(FEDERATED)
                s, g = b.s_tgt[a], b.g_own[a]
            else:
                b.require_mode(CCOD)
                s, g = b.s_bar[a], b.g_bar[a]
            self._h[key] = build_h_struct(self.data.y, self.data.delta, s, g, b.grid)
        return self._h[key]

    def _grid_index(self, t: float) -> int:
        if t not in self._jt_cache:
            jt = int(self.bundle.grid.index_leq(t))
            if jt < 0:
                raise InvalidInput(f"time {t} precedes the grid")
            self._jt_cache[t] = jt
        return self._jt_cache[t]

    # -- federated-mode pieces ------------------------------------------------

    def cell_components(self, t: float, a: int) -> CellComponents:
        b = self.bundle
        b.require_mode(FEDERATED)
        jt = self._grid_index(t)
        h = self._h_struct(a, "own").h_at(t)
        ind_a = (self.data.a == a).astype(float)
        pi_a = np.clip(b.propensity(a), 1e-12, None)
        s_at_t = b.s_tgt[a][:, jt]
        contrib = s_at_t * ind_a / pi_a * h
        tgt = self.data.site_rows(0)
        aug = {}
        for k in self.source_sites:
            rows = self.data.site_rows(k)
            aug[k] = b.omega[rows] * contrib[rows]
        return CellComponents(t=float(t), a=int(a), n=self.n,
                              anchor=s_at_t[tgt], xi01=contrib[tgt], aug=aug)

    def phi_target(self, t: float, a: int) -> np.ndarray:
        b = self.bundle
        b.require_mode(FEDERATED)
        jt = self._grid_index(t)
        h = self._h_struct(a, "own").h_at(t)
        ind_a = (self.data.a == a).astype(float)
        pi_a = np.clip(b.propensity(a), 1e-12, None)
        s_at_t = b.s_tgt[a][:, jt]
        ind0 = (self.data.r == 0).astype(float)
        return ind0 / self.p_site[0] * (1.0 - ind_a / pi_a * h) * s_at_t

    def phi_site(self, k: int, t: float, a: int) -> np.ndarray:
        b = self.bundle
        b.require_mode(FEDERATED)
        if k not in self.p_site:
            raise EmptySite(f"site {k} has no observations")
        jt = self._grid_index(t)
        h = self._h_struct(a, "own").h_at(t)
        ind_a = (self.data.a == a).astype(float)
        pi_a = np.clip(b.propensity(a), 1e-12, None)
        s_at_t = b.s_tgt[a][:, jt]
        ind0 = (self.data.r == 0).astype(float)
        indk = (self.data.r == k).astype(float)
        anchor = ind0 / self.p_site[0] * s_at_t
        aug = indk / self.p_site[k] * b.omega * s_at_t * ind_a / pi_a * h
        return anchor - aug

    def phi_ccod(self, t: float, a: int) -> np.ndarray:
        b = self.bundle
        b.require_mode(CCOD)
        jt = self._grid_index(t)
        h = self._h_struct(a, "ccod").h_at(t)
        ind_a = (self.data.a == a).astype(float)
        pi_a = np.clip(b.propensity(a, pooled=True), 1e-12, None)
        s_at_t = b.s_bar[a][:, jt]
        ind0 = (self.data.r == 0).astype(float)
        p0 = self.p_site[0]
        return (ind0 / p0 - b.q0 / p0 * ind_a / pi_a * h) * s_at_t

    def cell(self, t: float, a: int, estimators) -> dict:
        out = {}
        for est in estimators:
            if est == TGT:
                phi = self.phi_target(t, a)
            elif est == CCOD_EST:
                phi = self.phi_ccod(t, a)
            elif est.startswith("SITE"):
                phi = self.phi_site(int(est[4:]), t, a)
            else:
                raise InvalidInput(f"unknown estimator {est!r}")
            theta = float(np.mean(phi))
            out[est] = CellSlice(theta=theta, phi=phi, phi_centered=phi - theta)
        return out


def eif_target(bundle: NuisanceBundle, dataset: Dataset, t: float, a: int) -> CellSlice:
    """Target-only influence slice at one (t, a) cell."""
    cell = EifEngine(bundle, dataset).cell(float(t), int(a), (TGT,))
    return cell[TGT]


def eif_ccod(bundle: NuisanceBundle, dataset: Dataset, t: float, a: int) -> CellSlice:
    """Pooled-outcome influence slice; requires a pooled-mode bundle."""
    cell = EifEngine(bundle, dataset).cell(float(t), int(a), (CCOD_EST,))
    return cell[CCOD_EST]


def eif_site(bundle: NuisanceBundle, dataset: Dataset, k: int, t: float, a: int) -> CellSlice:
    """Transported site-k influence slice (k >= 1)."""
    if k < 1:
        raise InvalidInput("site-specific slices are defined for source sites (k >= 1)")
    cell = EifEngine(bundle, dataset).cell(float(t), int(a), (site_estimator(k),))
    return cell[site_estimator(k)]


def build_influence_table(bundle: NuisanceBundle, dataset: Dataset, times, arms,
                          estimators=None) -> InfluenceTable:
    """Materialize influence values for the requested cells."""
    engine = EifEngine(bundle, dataset)
    if estimators is None:
        if bundle.mode == CCOD:
            estimators = (CCOD_EST,)
        else:
            estimators = (TGT,) + tuple(site_estimator(k) for k in engine.source_sites)
    estimators = tuple(estimators)
    table = InfluenceTable(
        times=tuple(float(t) for t in times),
        arms=tuple(int(a) for a in arms),
        estimators=estimators,
        n=dataset.n,
        site_of_row=dataset.r.copy(),
    )
    fed_ests = [e for e in estimators if e == TGT or e.startswith("SITE")]
    for t in table.times:
        for a in table.arms:
            table.cells[(t, a)] = engine.cell(t, a, estimators)
            if fed_ests and bundle.mode == FEDERATED:
                table.components[(t, a)] = engine.cell_components(t, a)
    return table


@dataclass
class EstimateWithCI:
    """Point estimate with a Wald interval on the probability scale."""

    theta: float
    se: float
    ci_lo: float
    ci_hi: float
    n_effective: int
    ci_missing: bool = False

    @classmethod
    def from_theta_se(cls, theta, se, n) -> "EstimateWithCI":
        theta_c = float(np.clip(theta, 0.0, 1.0))
        se = float(se)
        missing = se == 0.0
        lo = float(np.clip(theta_c - 1.96 * se, 0.0, 1.0))
        hi = float(np.clip(theta_c + 1.96 * se, 0.0, 1.0))
        return cls(theta=theta_c, se=se, ci_lo=lo, ci_hi=hi,
                   n_effective=int(n), ci_missing=missing)


def estimator_variance(table: InfluenceTable, estimator: str, t: float, a: int) -> EstimateWithCI:
    """Plug-in influence variance with site sizes treated as fixed by design.

    se^2 = (1/n) * sum_k p_k * Var(phi | site k); within-site centering
    matches the conditional variance the aggregated estimator uses, and for a
    single-site table it reduces to mean(phi_centered^2) / n exactly.
    """
    sl = table.slice(estimator, t, a)
    n = sl.phi.size
    if n == 0:
        raise EmptyTable("empty influence slice")
    total = 0.0
    for k in np.unique(table.site_of_row):
        rows = table.site_of_row == k
        vals = sl.phi[rows]
        total += rows.sum() / n * float(np.mean(vals**2) - np.mean(vals) ** 2)
    se = float(np.sqrt(max(total, 0.0) / n))
    return EstimateWithCI.from_theta_se(sl.theta, se, n)


def discrepancy(table: InfluenceTable, k: int, t: float, a: int) -> float:
    """Site discrepancy: site-k transported estimate minus the target estimate."""
    return table.theta(site_estimator(k), t, a) - table.theta(TGT, t, a)
