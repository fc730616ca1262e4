"""Cox proportional hazards fitting with Breslow tie handling and baseline.

The partial likelihood is maximized by Newton iterations with step-halving
on an internally standardized design (the optimum is invariant to affine
reparameterization; the returned coefficients and the convergence test are
in the original units). Constant design columns carry no partial-likelihood
information and are pinned at coefficient 0; genuine collinearity among
varying columns raises ``SingularDesign``. Conditional survival predictions
use the continuous-time form exp(-Lambda0(t) * exp(beta' z)).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .curves import CurveKind, StepCurve, TimeGrid
from .errors import DegenerateFit, InvalidInput, NonConvergence, SingularDesign


class _CoxWork:
    """Pre-sorted arrays and tie-group indices reused by every evaluation."""

    def __init__(self, z, times, events):
        t = np.asarray(times, dtype=float)
        e = np.asarray(events).astype(bool)
        order = np.argsort(-t, kind="stable")  # descending: risk sets are prefixes
        self.t = t[order]
        self.e = e[order]
        self.z = np.asarray(z, dtype=float)[order]
        _, inverse, counts = np.unique(-self.t, return_inverse=True, return_counts=True)
        last_of_group = np.cumsum(counts) - 1
        self.pos = last_of_group[inverse]       # prefix end of each row's risk set
        self.ev = np.flatnonzero(self.e)
        self.n, self.p = self.z.shape

    def loglik(self, beta) -> float:
        lp = np.clip(self.z @ beta, -500, 500)
        denom = np.cumsum(np.exp(lp))[self.pos[self.ev]]
        return float(np.sum(lp[self.ev] - np.log(denom)))

    def grad_hess(self, beta):
        lp = np.clip(self.z @ beta, -500, 500)
        w = np.exp(lp)
        s0 = np.cumsum(w)
        s1 = np.cumsum(w[:, None] * self.z, axis=0)
        s2 = np.cumsum(w[:, None, None] * (self.z[:, :, None] * self.z[:, None, :]), axis=0)
        pe = self.pos[self.ev]
        s0e = s0[pe]
        zbar = s1[pe] / s0e[:, None]
        grad = np.sum(self.z[self.ev] - zbar, axis=0)
        hess = -(np.sum(s2[pe] / s0e[:, None, None], axis=0) - zbar.T @ zbar)
        return grad, hess


def breslow_partial_loglik(beta, z, times, events) -> float:
    """Breslow partial log-likelihood at ``beta``."""
    beta = np.atleast_1d(np.asarray(beta, dtype=float))
    return _CoxWork(np.atleast_2d(np.asarray(z, dtype=float)), times, events).loglik(beta)


@dataclass
class CoxModel:
    """Fitted Cox model: coefficients plus a Breslow baseline cumulative hazard."""

    beta: np.ndarray
    baseline_cumhaz: StepCurve
    feature_spec: tuple
    n_events: int = 0
    converged: bool = True
    grad_norm: float = 0.0

    def linear_predictor(self, z) -> np.ndarray:
        return np.asarray(z, dtype=float) @ self.beta

    def survival(self, z, grid_points) -> np.ndarray:
        """Conditional survival matrix (n, len(grid_points))."""
        lam0 = self.baseline_cumhaz.evaluate(np.asarray(grid_points, dtype=float))
        lp = np.clip(self.linear_predictor(z), -500, 500)
        return np.exp(-np.outer(np.exp(lp), lam0))

    def cumhaz(self, z, grid_points) -> np.ndarray:
        lam0 = self.baseline_cumhaz.evaluate(np.asarray(grid_points, dtype=float))
        lp = np.clip(self.linear_predictor(z), -500, 500)
        return np.outer(np.exp(lp), lam0)


def breslow_baseline(beta, z, times, events) -> StepCurve:
    """Breslow estimator of the baseline cumulative hazard."""
    work = _CoxWork(z, times, events)
    w = np.exp(np.clip(work.z @ beta, -500, 500))
    s0 = np.cumsum(w)
    uniq_desc, inverse, counts = np.unique(-work.t, return_inverse=True, return_counts=True)
    last = np.cumsum(counts) - 1
    denom_by_group = s0[last]
    d_by_group = np.bincount(inverse, weights=work.e.astype(float), minlength=uniq_desc.size)
    times_asc = -uniq_desc[::-1]
    dlam = (d_by_group / denom_by_group)[::-1]
    keep = times_asc >= 0
    times_asc, dlam = times_asc[keep], dlam[keep]
    if times_asc.size == 0 or times_asc[0] != 0.0:
        times_asc = np.concatenate(([0.0], times_asc))
        dlam = np.concatenate(([0.0], dlam))
    return StepCurve(TimeGrid(times_asc), np.cumsum(dlam), CurveKind.CUM_HAZARD)


def cox_fit_design(z, times, events, *, max_iter=100, tol=1e-8, feature_spec=None) -> CoxModel:
    """Fit a Cox model on an explicit design matrix.

    Newton with step-halving; terminates when the gradient sup-norm (in the
    original covariate units) is below ``tol``. Raises ``DegenerateFit`` when
    there are no events, ``SingularDesign`` on exact collinearity among
    varying columns, and ``NonConvergence`` when the iteration budget is
    exhausted.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    t = np.asarray(times, dtype=float)
    e = np.asarray(events).astype(bool)
    n, p = z.shape
    if t.shape[0] != n:
        raise InvalidInput("design and time lengths differ")
    if e.sum() == 0:
        raise DegenerateFit("no events of the requested type")
    col_sd = z.std(axis=0)
    varying = col_sd > 0
    if varying.any():
        centered = z[:, varying] - z[:, varying].mean(axis=0)
        if np.linalg.matrix_rank(centered) < int(varying.sum()):
            raise SingularDesign("collinear covariates in the design matrix")
    scale = np.where(varying, col_sd, 1.0)
    shift = z.mean(axis=0)
    work = _CoxWork((z - shift) / scale, t, e)

    beta_s = np.zeros(p)  # standardized-unit coefficients
    ll = work.loglik(beta_s)
    grad_norm = np.inf
    for _ in range(max_iter):
        grad, hess = work.grad_hess(beta_s)
        # convergence is assessed on the original-unit gradient
        grad_norm = float(np.max(np.abs(grad * scale))) if p else 0.0
        if grad_norm < tol:
            break
        try:
            step = np.linalg.solve(-hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        if not np.all(np.isfinite(step)):
            step = np.linalg.lstsq(-hess, grad, rcond=None)[0]
        improved = False
        fac = 1.0
        for _h in range(30):
            cand = beta_s + fac * step
            ll_new = work.loglik(cand)
            if ll_new >= ll - 1e-9 * (1.0 + abs(ll)):
                beta_s, ll = cand, ll_new
                improved = True
                break
            fac *= 0.5
        if not improved:
            # float-limit stall: accept only if effectively converged
            grad, _ = work.grad_hess(beta_s)
            grad_norm = float(np.max(np.abs(grad * scale))) if p else 0.0
            if grad_norm < tol:
                break
            raise NonConvergence(
                f"Cox line search stalled (grad sup-norm {grad_norm:.3g})",
                beta=beta_s / scale, grad_norm=grad_norm,
            )
    else:
        raise NonConvergence(
            f"Cox Newton did not reach tolerance (grad sup-norm {grad_norm:.3g})",
            beta=beta_s / scale,
            grad_norm=grad_norm,
        )
    beta = beta_s / scale
    # pinv-style steps keep flat (constant-column) directions exactly at zero
    baseline = breslow_baseline(beta, z, t, e)
    return CoxModel(
        beta=beta,
        baseline_cumhaz=baseline,
        feature_spec=tuple(feature_spec) if feature_spec else tuple(f"z{j}" for j in range(p)),
        n_events=int(e.sum()),
        converged=True,
        grad_norm=grad_norm,
    )


def cox_fit(data, outcome="event", **kwargs) -> CoxModel:
    """Fit a Cox model on observation records with design [x, a].

    ``outcome='censoring'`` flips the event indicator so the model describes
    the censoring time distribution.
    """
    from .data import Dataset

    ds = data if isinstance(data, Dataset) else Dataset.from_observations(data)
    flip = str(outcome).lower().startswith("c")
    events = 1 - ds.delta if flip else ds.delta
    z = np.column_stack([ds.x, ds.a])
    spec = tuple(f"x{j + 1}" for j in range(ds.d)) + ("a",)
    return cox_fit_design(z, ds.y, events, feature_spec=spec, **kwargs)


def predict_conditional_survival(model: CoxModel, x, a, grid: TimeGrid) -> StepCurve:
    """Survival curve for one covariate vector under treatment ``a``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size + 1 != model.beta.size:
        raise InvalidInput("covariate dimension does not match the fitted model")
    z = np.concatenate([x, [float(a)]])[None, :]
    vals = model.survival(z, grid.points)[0]
    return StepCurve(grid, vals, CurveKind.SURVIVAL)
