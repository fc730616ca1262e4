"""Nuisance learners: logistic propensities, the discrete survival ensemble
(marginal KM, treatment-stratified KM, Cox), and covariate density ratios.

The survival ensemble is a discrete super learner: every candidate is fit on
the training folds of an internal cross-validation split, scored by the
IPCW-weighted integrated Brier score on [0, tau], and the winner is refit on
the full training set.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .cox import CoxModel, cox_fit_design
from .curves import StepCurve, km_fit
from .errors import CoarseRatioFailure, InvalidInput

PROP_CLIP = (0.01, 0.99)


def _expit(v):
    out = np.empty_like(v, dtype=float)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


@dataclass
class LogisticModel:
    """Logistic regression fit by Newton-IRLS with a small L2 ridge."""

    coef: np.ndarray          # [intercept, slopes...]
    degenerate: bool = False
    constant: float | None = None

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.degenerate:
            return np.full(x.shape[0], self.constant)
        z = self.coef[0] + x @ self.coef[1:]
        return _expit(z)

    def predict_clipped(self, x, lo=PROP_CLIP[0], hi=PROP_CLIP[1]) -> np.ndarray:
        return np.clip(self.predict(x), lo, hi)


def fit_logistic(x, labels, ridge=1e-8, max_iter=100, tol=1e-10) -> LogisticModel:
    """Core IRLS logistic fit of binary ``labels`` on ``x``.

    A single-class input returns a degenerate constant model instead of
    diverging; separable data stop when the ridge-regularized gradient is
    flat and rely on downstream clipping.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    yv = np.asarray(labels, dtype=float)
    if x.shape[0] != yv.shape[0]:
        raise InvalidInput("feature and label lengths differ")
    if yv.min() == yv.max():
        return LogisticModel(coef=np.zeros(x.shape[1] + 1), degenerate=True, constant=float(yv[0]))
    design = np.column_stack([np.ones(x.shape[0]), x])
    beta = np.zeros(design.shape[1])
    for _ in range(max_iter):
        p = _expit(design @ beta)
        w = np.maximum(p * (1.0 - p), 1e-12)
        grad = design.T @ (yv - p) - ridge * beta
        if np.max(np.abs(grad)) < tol:
            break
        hess = (design * w[:, None]).T @ design + ridge * np.eye(design.shape[1])
        step = np.linalg.solve(hess, grad)
        # crude safeguard against overshoot on separable data
        if np.max(np.abs(step)) > 50:
            step = step * (50 / np.max(np.abs(step)))
        beta = beta + step
    return LogisticModel(coef=beta)


def fit_propensity(x, a, ridge=1e-8) -> LogisticModel:
    """Treatment propensity model; predictions are clipped to [0.01, 0.99].

    With only one arm present the model is degenerate: a constant pinned at
    the clip boundary, flagged for the caller.
    """
    a = np.asarray(a)
    if a.min() == a.max():
        const = PROP_CLIP[1] if a[0] == 1 else PROP_CLIP[0]
        return LogisticModel(coef=np.zeros(np.atleast_2d(x).shape[1] + 1), degenerate=True, constant=const)
    return fit_logistic(x, a, ridge=ridge)


# ---------------------------------------------------------------------------
# survival candidates


@dataclass
class MarginalKMModel:
    curve: StepCurve
    tag: str = "km"

    def survival_matrix(self, x, a, grid_points) -> np.ndarray:
        vals = self.curve.evaluate(np.asarray(grid_points, dtype=float))
        return np.tile(vals, (np.atleast_2d(x).shape[0], 1))


@dataclass
class StratifiedKMModel:
    curves: dict  # arm -> StepCurve
    tag: str = "km_strat"

    def survival_matrix(self, x, a, grid_points) -> np.ndarray:
        vals = self.curves[int(a)].evaluate(np.asarray(grid_points, dtype=float))
        return np.tile(vals, (np.atleast_2d(x).shape[0], 1))


@dataclass
class CoxSurvivalModel:
    model: CoxModel
    tag: str = "cox"

    def survival_matrix(self, x, a, grid_points) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        z = np.column_stack([x, np.full(x.shape[0], float(a))])
        return self.model.survival(z, grid_points)


def _fit_marginal_km(x, a, y, e):
    return MarginalKMModel(km_fit(times=y, events=e))


def _fit_stratified_km(x, a, y, e):
    curves = {}
    for arm in (0, 1):
        rows = a == arm
        if rows.sum() == 0:
            curves[arm] = km_fit(times=y, events=e)
        else:
            curves[arm] = km_fit(times=y[rows], events=e[rows])
    return StratifiedKMModel(curves)


def _fit_cox(x, a, y, e):
    z = np.column_stack([x, a.astype(float)])
    return CoxSurvivalModel(cox_fit_design(z, y, e, max_iter=60))

_CANDIDATES = (("km", _fit_marginal_km), ("km_strat", _fit_stratified_km), ("cox", _fit_cox))


def integrated_brier(surv, y, e, eval_times, ipcw_curve) -> float:
    """IPCW integrated Brier score of a survival matrix over ``eval_times``.

    ``ipcw_curve`` is the (training-fold) Kaplan-Meier curve of the censoring
    process of the outcome being scored.
    """
    eval_times = np.asarray(eval_times, dtype=float)
    g_at_t = np.maximum(ipcw_curve.evaluate(eval_times), 0.05)
    g_at_y = np.maximum(ipcw_curve.left_limit(y), 0.05)
    yt = y[:, None] > eval_times[None, :]
    w_event = ((y[:, None] <= eval_times[None, :]) & (e[:, None] == 1)) / g_at_y[:, None]
    w_alive = yt / g_at_t[None, :]
    bs = np.mean(w_event * surv**2 + w_alive * (1.0 - surv) ** 2, axis=0)
    if eval_times.size == 1:
        return float(bs[0])
    return float(np.trapezoid(bs, eval_times) / (eval_times[-1] - eval_times[0]))


@dataclass
class EnsembleFit:
    """Winner of the discrete super learner plus its CV diagnostics."""

    model: object
    tag: str
    cv_scores: dict
    degenerate: bool = False

    def survival_matrix(self, x, a, grid_points) -> np.ndarray:
        return self.model.survival_matrix(x, a, grid_points)


def fit_survival_ensemble(x, a, y, delta, outcome="event", v_folds=3, rng=None,
                          candidates=None, tau=None) -> EnsembleFit:
    """Discrete super learner over {marginal KM, stratified KM, Cox}.

    ``outcome='censoring'`` fits the censoring-time distribution (the event
    indicator is flipped and the IPCW weights come from the event process).
    Candidates that fail to fit are dropped; if no candidate has any events,
    the marginal KM of the (possibly all-censored) data is returned with a
    degenerate flag.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    a = np.asarray(a, dtype=np.int64)
    y = np.asarray(y, dtype=float)
    delta = np.asarray(delta, dtype=np.int64)
    flip = str(outcome).lower().startswith("c")
    e = (1 - delta) if flip else delta
    cand = list(candidates) if candidates is not None else list(_CANDIDATES)
    rng = rng if rng is not None else np.random.default_rng(0)
    n = y.size

    if e.sum() == 0:
        return EnsembleFit(model=_fit_marginal_km(x, a, y, e), tag="km", cv_scores={}, degenerate=True)
    if len(cand) == 1:
        tag, fitter = cand[0]
        return EnsembleFit(model=fitter(x, a, y, e), tag=tag, cv_scores={})

    tmax = float(tau) if tau is not None else float(y.max())
    eval_times = np.linspace(0.0, tmax, 13)[1:]  # skip t=0 where every model is exact
    folds = rng.permutation(n) % max(2, min(v_folds, n))
    scores = {tag: [] for tag, _ in cand}
    for m in range(folds.max() + 1):
        tr, va = folds != m, folds == m
        if e[tr].sum() == 0 or va.sum() == 0:
            continue
        ipcw = km_fit(times=y[tr], events=1 - e[tr])
        for tag, fitter in cand:
            try:
                model = fitter(x[tr], a[tr], y[tr], e[tr])
            except Exception:
                scores[tag].append(np.inf)
                continue
            surv = np.vstack([
                model.survival_matrix(x[va][a[va] == arm], arm, eval_times)
                for arm in (0, 1) if (a[va] == arm).any()
            ])
            order = np.concatenate([np.flatnonzero(a[va] == arm) for arm in (0, 1) if (a[va] == arm).any()])
            yv, ev = y[va][order], e[va][order]
            scores[tag].append(integrated_brier(surv, yv, ev, eval_times, ipcw))
    mean_scores = {tag: float(np.mean(v)) if v else np.inf for tag, v in scores.items()}
    best = min(mean_scores, key=lambda tag: (mean_scores[tag], [c[0] for c in cand].index(tag)))
    fitter = dict(cand)[best]
    try:
        model = fitter(x, a, y, e)
    except Exception:
        model = _fit_marginal_km(x, a, y, e)
        best = "km"
    return EnsembleFit(model=model, tag=best, cv_scores=mean_scores)


# ---------------------------------------------------------------------------
# density ratios


@dataclass
class RatioModel:
    """Covariate density ratio target/source with positivity clipping."""

    kind: str                     # "pooled" or "coarse"
    logistic: LogisticModel | None = None
    prior_factor: float = 1.0     # n_source / n_target, from Bayes inversion
    alpha: float = 0.0
    beta: np.ndarray | None = None
    eta_cap: float = 20.0
    fallback: bool = False

    def ratio_raw(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if self.fallback:
            return np.ones(x.shape[0])
        if self.kind == "pooled":
            p = np.clip(self.logistic.predict(x), 1e-12, 1 - 1e-12)
            return p / (1.0 - p) * self.prior_factor
        return np.exp(np.clip(self.alpha + x @ self.beta, -500, 500))

    def ratio(self, x) -> np.ndarray:
        return np.clip(self.ratio_raw(x), 1.0 / self.eta_cap, self.eta_cap)


def fit_density_ratio_pooled(target_x, source_x, eta_cap=20.0) -> RatioModel:
    """Density ratio by logistic discrimination of target vs source rows.

    The fitted class probability p(x) = P(target | x) inverts to
    w(x) = p/(1-p) * n_source/n_target.
    """
    tx = np.atleast_2d(np.asarray(target_x, dtype=float))
    sx = np.atleast_2d(np.asarray(source_x, dtype=float))
    if tx.shape[0] == 0 or sx.shape[0] == 0:
        raise InvalidInput("both covariate matrices must be nonempty")
    if tx.shape[1] != sx.shape[1]:
        raise InvalidInput("covariate dimension mismatch between sites")
    stacked = np.vstack([tx, sx])
    labels = np.concatenate([np.ones(tx.shape[0]), np.zeros(sx.shape[0])])
    logistic = fit_logistic(stacked, labels)
    return RatioModel(
        kind="pooled",
        logistic=logistic,
        prior_factor=sx.shape[0] / tx.shape[0],
        eta_cap=eta_cap,
    )


@dataclass
class SiteCovariateSummary:
    """Coarse covariate summary a site is willing to share."""

    site: int
    n: int
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=float)
        self.cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if self.n < 1:
            raise InvalidInput("summary needs at least one observation")
        if self.cov.shape != (self.mean.size, self.mean.size):
            raise InvalidInput("covariance shape does not match the mean")
        if np.max(np.abs(self.cov - self.cov.T)) > 1e-8:
            raise InvalidInput("covariance must be symmetric")

    @classmethod
    def from_rows(cls, site, x) -> "SiteCovariateSummary":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        mean = x.mean(axis=0)
        centered = x - mean
        cov = centered.T @ centered / x.shape[0]
        return cls(site=int(site), n=x.shape[0], mean=mean, cov=cov)

    def to_json(self) -> dict:
        return {"site": self.site, "n": self.n, "mean": self.mean.tolist(), "cov": self.cov.tolist()}

    @classmethod
    def from_json(cls, payload: dict) -> "SiteCovariateSummary":
        return cls(site=int(payload["site"]), n=int(payload["n"]),
                   mean=np.asarray(payload["mean"], dtype=float),
                   cov=np.asarray(payload["cov"], dtype=float))

    def dumps(self) -> str:
        return json.dumps(self.to_json())


def fit_density_ratio_coarse(target: SiteCovariateSummary, source: SiteCovariateSummary,
                             eta_cap=20.0) -> RatioModel:
    """Exponential tilt w(x) = exp(alpha + beta'x) matched on coarse summaries.

    Under a Gaussian working model for the source covariates, the moment
    system E_src[w(X)] = 1, E_src[w(X) X] = target mean has the exact
    solution beta = cov_src^{-1} (mean_tgt - mean_src) and
    alpha = -beta' mean_src - beta' cov_src beta / 2.
    """
    if target.mean.size != source.mean.size:
        raise InvalidInput("summary dimension mismatch")
    diff = target.mean - source.mean
    try:
        beta = np.linalg.solve(source.cov, diff)
    except np.linalg.LinAlgError as exc:
        raise CoarseRatioFailure(f"singular source covariance: {exc}") from None
    if not np.all(np.isfinite(beta)) or np.max(np.abs(beta)) > 1e8:
        raise CoarseRatioFailure("tilt solve diverged")
    alpha = float(-beta @ source.mean - 0.5 * beta @ source.cov @ beta)
    return RatioModel(kind="coarse", alpha=alpha, beta=beta, eta_cap=eta_cap)


def coarse_ratio_or_fallback(target, source, eta_cap=20.0):
    """Coarse ratio with the contractual fallback to w = 1 on failure."""
    try:
        return fit_density_ratio_coarse(target, source, eta_cap=eta_cap)
    except CoarseRatioFailure:
        return RatioModel(kind="coarse", alpha=0.0, beta=np.zeros(target.mean.size),
                          eta_cap=eta_cap, fallback=True)
