"""Foundational survival calculus: time grids, step curves, Kaplan-Meier,
Nelson-Aalen, product integrals and isotonic correction.

Curves are right-continuous step functions. A survival curve S satisfies
S(0-) = 1 and takes values in [0, 1]; a cumulative hazard curve starts at
0- with value 0 and is non-decreasing. Between grid points evaluation uses
right-continuous step lookup.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import InvalidHazard, InvalidInput

SURVIVAL_FLOOR = 1e-12


class CurveKind(Enum):
    SURVIVAL = "survival"
    CUM_HAZARD = "cum_hazard"


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing time points starting at 0 and ending at the horizon."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 1 or pts.size == 0:
            raise InvalidInput("time grid must be a nonempty 1-d array")
        if pts[0] != 0.0:
            raise InvalidInput("time grid must start at 0")
        if pts.size > 1 and not np.all(np.diff(pts) > 0):
            raise InvalidInput("time grid points must be strictly increasing")
        if np.any(pts < 0):
            raise InvalidInput("time grid points must be nonnegative")
        object.__setattr__(self, "points", pts)

    @property
    def tau(self) -> float:
        return float(self.points[-1])

    def __len__(self):
        return self.points.size

    @classmethod
    def regular(cls, tau: float, step: float) -> "TimeGrid":
        if tau <= 0 or step <= 0:
            raise InvalidInput("tau and step must be positive")
        n = int(round(tau / step))
        pts = np.arange(n + 1, dtype=float) * step
        if pts[-1] != tau:
            pts = np.append(pts, tau)
        return cls(pts)

    @classmethod
    def from_times(cls, times) -> "TimeGrid":
        """Grid made of 0 plus the distinct finite times."""
        t = np.unique(np.asarray(times, dtype=float))
        t = t[t >= 0]
        if t.size == 0 or t[0] != 0.0:
            t = np.concatenate(([0.0], t))
        return cls(t)

    def index_leq(self, times) -> np.ndarray:
        """Index of the largest grid point <= each time (-1 when time < 0)."""
        return np.searchsorted(self.points, np.asarray(times, dtype=float), side="right") - 1

    def index_lt(self, times) -> np.ndarray:
        """Index of the largest grid point strictly < each time (-1 when none)."""
        return np.searchsorted(self.points, np.asarray(times, dtype=float), side="left") - 1


@dataclass(frozen=True)
class StepCurve:
    """Right-continuous step function on a time grid."""

    grid: TimeGrid
    values: np.ndarray
    kind: CurveKind = CurveKind.SURVIVAL

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.shape != self.grid.points.shape:
            raise InvalidInput("curve values must match the grid length")
        if not np.all(np.isfinite(vals)):
            raise InvalidInput("curve values must be finite")
        # survival curves may leave [0, 1] before isotonic correction, so range
        # is not enforced at construction; hazards must be valid from the start
        if self.kind is CurveKind.CUM_HAZARD:
            tol = 1e-9
            if vals.min() < -tol:
                raise InvalidInput("cumulative hazard values must be nonnegative")
            if np.any(np.diff(vals) < -tol):
                raise InvalidInput("cumulative hazard must be non-decreasing")
            vals = np.maximum(vals, 0.0)
        object.__setattr__(self, "values", vals)

    @property
    def _pre_value(self) -> float:
        # value just before time 0 (no mass at negative times)
        return 1.0 if self.kind is CurveKind.SURVIVAL else 0.0

    def __call__(self, times):
        return self.evaluate(times)

    def evaluate(self, times):
        """Right-continuous lookup; times before 0 give the pre-0 value."""
        idx = self.grid.index_leq(times)
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)], self._pre_value)
        return out if np.ndim(times) else float(out)

    def left_limit(self, times):
        """Left limit: value just before each time."""
        idx = self.grid.index_lt(times)
        out = np.where(idx >= 0, self.values[np.maximum(idx, 0)], self._pre_value)
        return out if np.ndim(times) else float(out)

    def jumps(self) -> np.ndarray:
        """Jump sizes at each grid point (first jump is relative to the pre-0 value)."""
        return np.diff(self.values, prepend=self._pre_value)

    def resample(self, grid: TimeGrid) -> "StepCurve":
        return StepCurve(grid, self.evaluate(grid.points), self.kind)


def _km_na_counts(times, events, weights):
    t = np.asarray(times, dtype=float)
    e = np.asarray(events)
    if t.size == 0:
        raise InvalidInput("empty survival data")
    if np.any(t < 0):
        raise InvalidInput("negative observation times")
    w = np.ones_like(t) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != t.shape:
        raise InvalidInput("weights must match the data length")
    if np.any(w < 0) or w.sum() <= 0:
        raise InvalidInput("weights must be nonnegative and not all zero")
    order = np.argsort(t, kind="stable")
    t, e, w = t[order], e[order], w[order]
    uniq, start = np.unique(t, return_index=True)
    # weighted events and at-risk totals per distinct time
    cum_w = np.concatenate(([0.0], np.cumsum(w)))
    total = cum_w[-1]
    at_risk = total - cum_w[start]
    ev_w = w * (np.asarray(e) == 1)
    cum_ev = np.concatenate(([0.0], np.cumsum(ev_w)))
    stop = np.append(start[1:], t.size)
    d = cum_ev[stop] - cum_ev[start]
    return uniq, d, at_risk


def km_fit(data=None, weights=None, *, times=None, events=None) -> StepCurve:
    """Weighted Kaplan-Meier survival curve.

    ``data`` is an iterable of (time, event) pairs; alternatively pass
    ``times=``/``events=`` arrays. At each distinct event time the curve
    multiplies by (1 - d/n) with weighted event and at-risk counts.
    """
    if data is not None:
        arr = np.asarray(list(data), dtype=float)
        if arr.size == 0:
            raise InvalidInput("empty survival data")
        times, events = arr[:, 0], arr[:, 1]
    uniq, d, n_risk = _km_na_counts(times, events, weights)
    factors = np.where(d > 0, 1.0 - d / n_risk, 1.0)
    surv = np.cumprod(factors)
    grid_pts = uniq if uniq[0] == 0.0 else np.concatenate(([0.0], uniq))
    vals = surv if uniq[0] == 0.0 else np.concatenate(([1.0], surv))
    return StepCurve(TimeGrid(grid_pts), np.clip(vals, 0.0, 1.0), CurveKind.SURVIVAL)


def nelson_aalen_fit(data=None, weights=None, *, times=None, events=None) -> StepCurve:
    """Nelson-Aalen cumulative hazard: Lambda(t) = sum_{t_j <= t} d_j / n_j."""
    if data is not None:
        arr = np.asarray(list(data), dtype=float)
        if arr.size == 0:
            raise InvalidInput("empty survival data")
        times, events = arr[:, 0], arr[:, 1]
    uniq, d, n_risk = _km_na_counts(times, events, weights)
    cumhaz = np.cumsum(np.where(d > 0, d / n_risk, 0.0))
    grid_pts = uniq if uniq[0] == 0.0 else np.concatenate(([0.0], uniq))
    vals = cumhaz if uniq[0] == 0.0 else np.concatenate(([0.0], cumhaz))
    return StepCurve(TimeGrid(grid_pts), vals, CurveKind.CUM_HAZARD)


def product_integral(cumhaz: StepCurve) -> StepCurve:
    """Map a cumulative hazard to a survival curve via the discrete product
    S(t) = prod_{u <= t} (1 - dLambda(u)).

    A jump of exactly 1 yields zero survival afterwards; jumps above 1 are
    rejected because survival would go negative.
    """
    if cumhaz.kind is not CurveKind.CUM_HAZARD:
        raise InvalidInput("product_integral expects a cumulative hazard curve")
    jumps = cumhaz.jumps()
    if np.any(jumps > 1.0 + 1e-12):
        raise InvalidHazard(f"hazard jump {jumps.max():.6g} exceeds 1")
    surv = np.cumprod(1.0 - np.minimum(jumps, 1.0))
    return StepCurve(cumhaz.grid, np.clip(surv, 0.0, 1.0), CurveKind.SURVIVAL)


def survival_to_cumhaz(surv: StepCurve) -> StepCurve:
    """Inverse of ``product_integral``: dLambda(u) = -dS(u) / S(u-)."""
    if surv.kind is not CurveKind.SURVIVAL:
        raise InvalidInput("expects a survival curve")
    prev = np.concatenate(([1.0], surv.values[:-1]))
    jumps = (prev - surv.values) / np.maximum(prev, SURVIVAL_FLOOR)
    return StepCurve(surv.grid, np.cumsum(np.maximum(jumps, 0.0)), CurveKind.CUM_HAZARD)


def pava_non_increasing(values, weights=None) -> np.ndarray:
    """L2 projection onto non-increasing sequences (pool-adjacent-violators)."""
    y = np.asarray(values, dtype=float)
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    # blocks of (mean, weight, count), merged while the order constraint is violated
    means, wts, counts = [], [], []
    for yi, wi in zip(y, w):
        means.append(yi)
        wts.append(wi)
        counts.append(1)
        while len(means) > 1 and means[-2] < means[-1]:
            m2, w2, c2 = means.pop(), wts.pop(), counts.pop()
            m1, w1, c1 = means.pop(), wts.pop(), counts.pop()
            wt = w1 + w2
            means.append((m1 * w1 + m2 * w2) / wt)
            wts.append(wt)
            counts.append(c1 + c2)
    return np.repeat(means, counts)


def isotonic_correct(curve: StepCurve) -> StepCurve:
    """Project a survival curve onto non-increasing sequences, then clamp to [0, 1].

    Idempotent: applying it to an already corrected curve is a no-op.
    """
    if curve.kind is not CurveKind.SURVIVAL:
        raise InvalidInput("isotonic correction applies to survival curves")
    vals = np.clip(pava_non_increasing(curve.values), 0.0, 1.0)
    return StepCurve(curve.grid, vals, CurveKind.SURVIVAL)
