"""Federated weight optimization and aggregation.

Per (time, arm) cell the source-site weights minimize a penalized quadratic

    Q(eta) = P_n[(phi*_tgt - sum_k eta_k phi*_k)^2]
             + (lambda / n) * sum_k eta_k * chi_k^2

over the probability simplex (eta >= 0, sum over all sites = 1; the L1
penalty is linear there). The quadratic is assembled from moment statistics
that each site can compute locally: cross-site products of the centered
influence values vanish off the target rows, so only first and second
moments of the per-site augmentation terms are ever needed.

The solver enumerates KKT systems of the simplex-constrained QP (the
target-only vertex and full support first, then active sets by ascending
size; least-squares gives minimum-norm selections on flat faces), which is
exact for the small site counts this problem has and yields a Frank-Wolfe
duality gap at float precision.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .curves import pava_non_increasing
from .eif import CellComponents, EstimateWithCI, InfluenceTable
from .errors import BootstrapDegenerate, EmptyTable, InvalidInput, NumericalError
from .rng import cell_tags, substream


def default_lambda_grid(n: int):
    """{0} plus 11 log-spaced values; scaled by n so the effective penalty
    coefficient lambda/n spans 1e-2 .. 1e4."""
    return [0.0] + list(float(n) * np.logspace(-2.0, 4.0, 11))


# multiplier of the cross-validation standard-error rule for the penalty:
# sources are borrowed only when their held-out gain is unambiguous, which
# keeps the selected weights stable across replications
SE_RULE_FACTOR = 4.0


@dataclass
class SiteMoments:
    """Summary statistics of one site's augmentation values at one cell."""

    n: int
    sum_aug: float
    sum_sq: float
    fold_n: np.ndarray
    fold_sum: np.ndarray
    fold_sumsq: np.ndarray
    aug_rows: np.ndarray | None = None   # raw values; present only centrally

    @classmethod
    def from_rows(cls, aug: np.ndarray, fold_ids: np.ndarray, v: int, keep_rows=True):
        fold_n = np.array([int((fold_ids == f).sum()) for f in range(v)])
        fold_sum = np.array([float(np.sum(aug[fold_ids == f])) for f in range(v)])
        fold_sumsq = np.array([float(np.sum(aug[fold_ids == f] ** 2)) for f in range(v)])
        return cls(
            n=aug.size,
            sum_aug=float(np.sum(aug)),
            sum_sq=float(np.sum(aug**2)),
            fold_n=fold_n,
            fold_sum=fold_sum,
            fold_sumsq=fold_sumsq,
            aug_rows=aug.copy() if keep_rows else None,
        )


@dataclass
class CellStats:
    """Everything one (t, a) weight problem needs.

    Target-side vectors stay at full resolution (they live with the
    coordinator); source sites contribute only ``SiteMoments``.
    """

    t: float
    a: int
    anchor: np.ndarray        # target rows: outcome-model survival at t
    xi01: np.ndarray          # target rows: correction term
    tgt_folds: np.ndarray     # lambda-CV fold id per target row
    sites: dict               # k -> SiteMoments
    v_folds: int

    @property
    def n0(self) -> int:
        return self.anchor.size

    @property
    def n(self) -> int:
        return self.n0 + sum(s.n for s in self.sites.values())

    @property
    def site_ids(self) -> tuple:
        return tuple(sorted(self.sites))

    @property
    def p0(self) -> float:
        return self.n0 / self.n

    def p_site(self, k: int) -> float:
        return self.sites[k].n / self.n

    @property
    def theta0(self) -> float:
        return (float(np.sum(self.anchor)) - float(np.sum(self.xi01))) / self.n0

    def theta_site(self, k: int) -> float:
        return float(np.sum(self.anchor)) / self.n0 - self.sites[k].sum_aug / self.sites[k].n

    def chi(self, k: int) -> float:
        return float(np.sum(self.xi01)) / self.n0 - self.sites[k].sum_aug / self.sites[k].n


def cell_stats_from_components(comp: CellComponents, seed: int, v_folds: int = 5,
                               keep_rows=True) -> CellStats:
    """Attach deterministic lambda-CV folds to a cell's structural pieces.

    Fold membership depends only on (seed, site), not on the cell, so a site
    can derive it once and report per-fold moments for every cell.
    """
    n0 = comp.anchor.size
    tgt_folds = substream(seed, "lamcv", 0).permutation(n0) % v_folds
    sites = {}
    for k, aug in sorted(comp.aug.items()):
        fold_ids = substream(seed, "lamcv", int(k)).permutation(aug.size) % v_folds
        sites[int(k)] = SiteMoments.from_rows(aug, fold_ids, v_folds, keep_rows=keep_rows)
    return CellStats(t=comp.t, a=comp.a, anchor=comp.anchor, xi01=comp.xi01,
                     tgt_folds=tgt_folds, sites=sites, v_folds=v_folds)


@dataclass
class Quad:
    """Pieces of Q over the source sub-vector: Q = c - 2 b'x + x'Gx + pen'x."""

    c: float
    b: np.ndarray
    gram: np.ndarray
    chi_sq: np.ndarray
    n: int
    site_ids: tuple

    def q_value(self, x, lam: float) -> float:
        x = np.asarray(x, dtype=float)
        pen = (lam / self.n) * float(self.chi_sq @ np.abs(x))
        return self.c - 2.0 * float(self.b @ x) + float(x @ self.gram @ x) + pen


def assemble_quadratic(stats: CellStats, exclude_fold=None) -> Quad:
    """Quadratic pieces over the included rows (optionally excluding one
    lambda-CV fold). Centering constants stay full-sample."""
    p0 = stats.p0
    theta0 = stats.theta0
    ks = stats.site_ids
    thetas = {k: stats.theta_site(k) for k in ks}

    if exclude_fold is None:
        mask_t = np.ones(stats.n0, dtype=bool)
    else:
        mask_t = stats.tgt_folds != exclude_fold
    anchor, xi01 = stats.anchor[mask_t], stats.xi01[mask_t]
    inc = {}
    for k in ks:
        s = stats.sites[k]
        if exclude_fold is None:
            inc[k] = (s.n, s.sum_aug, s.sum_sq)
        else:
            inc[k] = (
                s.n - int(s.fold_n[exclude_fold]),
                s.sum_aug - float(s.fold_sum[exclude_fold]),
                s.sum_sq - float(s.fold_sumsq[exclude_fold]),
            )
    n_inc = int(mask_t.sum()) + sum(v[0] for v in inc.values())
    if mask_t.sum() == 0 or n_inc == 0:
        raise EmptyTable("no target rows in the included subset")

    phi0_t = (anchor - xi01) / p0 - theta0
    phik_t = {k: anchor / p0 - thetas[k] for k in ks}
    d = len(ks)
    b = np.empty(d)
    gram = np.empty((d, d))
    n_src_inc = {k: inc[k][0] for k in ks}
    total_src = sum(n_src_inc.values())
    c = (float(phi0_t @ phi0_t) + total_src * theta0**2) / n_inc
    for i, k in enumerate(ks):
        nk, s1, _ = inc[k]
        src_term = theta0 * (s1 / stats.p_site(k) + nk * thetas[k])
        other = sum(n_src_inc[j] for j in ks if j != k) * theta0 * thetas[k]
        b[i] = (float(phi0_t @ phik_t[k]) + src_term + other) / n_inc
    for i, k in enumerate(ks):
        nk, s1k, s2k = inc[k]
        own = s2k / stats.p_site(k) ** 2 + 2 * thetas[k] * s1k / stats.p_site(k) + nk * thetas[k] ** 2
        other = sum(n_src_inc[j] for j in ks if j != k) * thetas[k] ** 2
        gram[i, i] = (float(phik_t[k] @ phik_t[k]) + own + other) / n_inc
        for j_pos in range(i + 1, d):
            j = ks[j_pos]
            nj, s1j, _ = inc[j]
            cross = thetas[j] * (s1k / stats.p_site(k) + nk * thetas[k]) \
                + thetas[k] * (s1j / stats.p_site(j) + nj * thetas[j]) \
                + sum(n_src_inc[m] for m in ks if m not in (j, k)) * thetas[j] * thetas[k]
            gram[i, j_pos] = gram[j_pos, i] = (float(phik_t[k] @ phik_t[j]) + cross) / n_inc
    chi_sq = np.array([
        (float(np.sum(xi01)) / p0 - inc[k][1] / stats.p_site(k)) / n_inc
        for k in ks
    ]) ** 2
    quad = Quad(c=c, b=b, gram=gram, chi_sq=chi_sq, n=n_inc, site_ids=ks)
    _check_psd(quad)
    return quad


def _check_psd(quad: Quad, tol=1e-8):
    g = quad.gram
    if g.size == 0:
        return
    scale = max(1.0, float(np.max(np.abs(g))))
    if np.max(np.abs(g - g.T)) > tol * scale:
        raise NumericalError("Gram matrix is not symmetric")
    w = np.linalg.eigvalsh((g + g.T) / 2.0)
    if w.min() < -tol * scale:
        raise NumericalError(f"Gram matrix is not PSD (min eigenvalue {w.min():.3g})")


def build_quadratic(table: InfluenceTable, t: float, a: int, seed: int = 0,
                    v_folds: int = 5) -> Quad:
    """Spec-facing wrapper: quadratic pieces straight from an influence table."""
    comp = table.components.get((float(t), int(a)))
    if comp is None:
        raise EmptyTable(f"no federated components at (t={t}, a={a})")
    stats = cell_stats_from_components(comp, seed=seed, v_folds=v_folds)
    return assemble_quadratic(stats)


# ---------------------------------------------------------------------------
# simplex QP


def _solve_capped_simplex_qp(p_mat, q, tol=None):
    """Exact minimizer of 1/2 x'Px + q'x over {x >= 0, sum(x) <= 1}.

    KKT systems are enumerated smallest-support first with least-squares
    (minimum-norm) solves; the first system whose solution is primal and dual
    feasible is the global optimum by convexity.
    """
    d = q.size
    if d == 0:
        return np.zeros(0), 0.0
    if d > 16:
        raise NumericalError("weight solver supports at most 16 source sites")
    scale = max(1.0, float(np.max(np.abs(p_mat))) if p_mat.size else 0.0, float(np.max(np.abs(q))))
    tol = 1e-9 * scale if tol is None else tol

    def kkt_ok(x, nu):
        if np.min(x) < -tol or np.sum(x) > 1.0 + tol:
            return False
        grad = p_mat @ x + q
        mu = grad + nu
        if np.min(mu) < -tol:
            return False
        return True

    def _lin_solve(mat, rhs):
        try:
            sol = np.linalg.solve(mat, rhs)
            if np.all(np.isfinite(sol)):
                return sol
        except np.linalg.LinAlgError:
            pass
        return np.linalg.lstsq(mat, rhs, rcond=None)[0]  # minimum-norm on flats

    full = (1 << d) - 1
    ordered = sorted(range(1 << d), key=lambda s: bin(s).count("1"))
    # common optima first: all mass on the target (large penalties), then
    # full-support solutions, then the remaining active sets by size
    cases = [(0, False), (full, False), (full, True)]
    cases += [(s, sa) for s in ordered for sa in (False, True) if (s, sa) not in cases]
    for s_bits, sum_active in cases:
        free = [i for i in range(d) if s_bits >> i & 1]
        x = np.zeros(d)
        nu = 0.0
        if not free:
            if sum_active:
                continue
        else:
            pf = p_mat[np.ix_(free, free)]
            if not sum_active:
                sol = _lin_solve(pf, -q[free])
                if np.max(np.abs(pf @ sol + q[free])) > 1e-7 * scale + 1e-12:
                    continue
                x[free] = sol
            else:
                m = len(free)
                kkt = np.zeros((m + 1, m + 1))
                kkt[:m, :m] = pf
                kkt[:m, m] = 1.0
                kkt[m, :m] = 1.0
                rhs = np.concatenate([-q[free], [1.0]])
                sol = _lin_solve(kkt, rhs)
                if np.max(np.abs(kkt @ sol - rhs)) > 1e-7 * scale + 1e-12:
                    continue
                x[free] = sol[:m]
                nu = float(sol[m])
                if nu < -tol:
                    continue
        if sum_active and abs(np.sum(x) - 1.0) > tol:
            continue
        if kkt_ok(x, nu):
            best = np.clip(x, 0.0, None)
            if np.sum(best) > 1.0:
                best = best / np.sum(best)
            return best, _fw_gap(p_mat, q, best)
    raise NumericalError("no KKT-feasible subset found (non-convex quadratic?)")


def _fw_gap(p_mat, q, x) -> float:
    grad = p_mat @ x + q
    vertex_best = min(0.0, float(np.min(grad))) if q.size else 0.0
    return max(float(grad @ x) - vertex_best, 0.0)


@dataclass
class WeightSolution:
    """Simplex weights for one (t, a) cell with solver diagnostics."""

    t: float
    a: int
    eta: np.ndarray          # length K: target first, then sorted source sites
    site_ids: tuple          # source site ids aligned with eta[1:]
    lam: float
    chi_sq: np.ndarray
    objective: float
    kkt_gap: float

    def eta_source(self) -> np.ndarray:
        return self.eta[1:]


def solve_weights(quad: Quad, lam: float, t: float = 0.0, a: int = 0) -> WeightSolution:
    """Minimize the penalized quadratic over the simplex."""
    if lam < 0:
        raise InvalidInput("lambda must be nonnegative")
    d = len(quad.site_ids)
    pen = (lam / quad.n) * quad.chi_sq
    p_mat = 2.0 * quad.gram
    q = -2.0 * quad.b + pen
    x, gap = _solve_capped_simplex_qp(p_mat, q)
    eta = np.concatenate([[1.0 - float(np.sum(x))], x])
    eta = np.clip(eta, 0.0, 1.0)
    eta = eta / eta.sum()
    return WeightSolution(
        t=t, a=a, eta=eta, site_ids=quad.site_ids, lam=float(lam),
        chi_sq=quad.chi_sq.copy(), objective=quad.q_value(x, lam), kkt_gap=gap,
    )


def choose_lambda(stats: CellStats, lambdas, v_folds=None) -> tuple:
    """Cross-validated penalty; ties resolve to the largest lambda.

    The held-out score for a candidate lambda is the squared error of the
    training-fold weighted estimate against the target-only estimate on the
    held-out fold. The held-out target estimate is unbiased, so a source
    site whose transported estimate is biased inflates the score of every
    lambda too small to exclude it; a purely residual-based score cannot see
    that bias because centering removes the estimator means.

    Returns (lambda, flagged) where flagged marks the degenerate-fold
    fallback to the median of the grid.
    """
    lambdas = list(lambdas)
    if not lambdas:
        raise InvalidInput("empty lambda grid")
    if len(lambdas) == 1:
        return float(lambdas[0]), False
    v = stats.v_folds if v_folds is None else v_folds
    quads = []
    for fold in range(v):
        if int(np.sum(stats.tgt_folds == fold)) == 0 or int(np.sum(stats.tgt_folds != fold)) == 0:
            return float(np.median(lambdas)), True
        try:
            quads.append(assemble_quadratic(stats, exclude_fold=fold))
        except EmptyTable:
            return float(np.median(lambdas)), True

    def val_score(fold, eta):
        mask_v = stats.tgt_folds == fold
        mask_t = ~mask_v
        theta0_val = float(np.mean(stats.anchor[mask_v] - stats.xi01[mask_v]))
        anchor_tr = float(np.mean(stats.anchor[mask_t]))
        theta0_tr = float(np.mean(stats.anchor[mask_t] - stats.xi01[mask_t]))
        fed_tr = eta[0] * theta0_tr
        for i, k in enumerate(stats.site_ids):
            sm = stats.sites[k]
            n_tr = sm.n - int(sm.fold_n[fold])
            if n_tr == 0:
                return np.inf
            s1_tr = sm.sum_aug - float(sm.fold_sum[fold])
            fed_tr += eta[1 + i] * (anchor_tr - s1_tr / n_tr)
        return (fed_tr - theta0_val) ** 2

    lam_sorted = sorted(float(v_) for v_ in lambdas)
    fold_scores = {}
    for lam in lam_sorted:
        fold_scores[lam] = np.array([val_score(f, solve_weights(quads[f], lam).eta) for f in range(v)])
    means = {lam: float(np.mean(s)) for lam, s in fold_scores.items()}
    best_lam = None
    best_score = np.inf
    for lam in lam_sorted:
        if means[lam] <= best_score:
            best_lam, best_score = lam, means[lam]
    # standard-error rule on fold-paired score differences: take the largest
    # lambda statistically indistinguishable from the minimizer. The
    # conservative multiplier keeps the selected weights stable across
    # replications, which is what makes the fixed-weight plug-in variance of
    # the aggregated estimator honest in finite samples.
    chosen = best_lam
    for lam in lam_sorted:
        if lam <= best_lam:
            continue
        diff = fold_scores[lam] - fold_scores[best_lam]
        se_diff = float(np.std(diff, ddof=1) / np.sqrt(v)) if v > 1 else 0.0
        if float(np.mean(diff)) <= SE_RULE_FACTOR * se_diff:
            chosen = lam
    return chosen, False


def solve_weights_bootstrap(stats: CellStats, lam: float, b_reps=200, seed=0) -> WeightSolution:
    """Site-stratified nonparametric bootstrap of the weight solve.

    Returns the component-wise mean weight vector renormalized to the
    simplex; the reported gap/objective are the worst replicate gap and the
    full-sample objective at the averaged weights.
    """
    if b_reps < 1:
        raise InvalidInput("bootstrap needs at least one replicate")
    for k in stats.site_ids:
        if stats.sites[k].aug_rows is None:
            raise InvalidInput("bootstrap needs per-row augmentation values (centralized mode)")
    etas, gaps, skipped = [], [0.0], 0
    for b in range(b_reps):
        rng = substream(seed, "boot", *cell_tags(stats.t, stats.a), b)
        idx0 = rng.integers(0, stats.n0, stats.n0)
        sites_b = {}
        empty = False
        for k in stats.site_ids:
            rows = stats.sites[k].aug_rows
            if rows.size == 0:
                empty = True
                break
            draw = rows[rng.integers(0, rows.size, rows.size)]
            sites_b[k] = SiteMoments.from_rows(draw, np.zeros(rows.size, dtype=int), 1, keep_rows=False)
        if empty:
            skipped += 1
            continue
        stats_b = CellStats(t=stats.t, a=stats.a, anchor=stats.anchor[idx0],
                            xi01=stats.xi01[idx0], tgt_folds=np.zeros(stats.n0, dtype=int),
                            sites=sites_b, v_folds=1)
        sol = solve_weights(assemble_quadratic(stats_b), lam, t=stats.t, a=stats.a)
        etas.append(sol.eta)
        gaps.append(sol.kkt_gap)
    if skipped > 0.1 * b_reps:
        raise BootstrapDegenerate(f"{skipped}/{b_reps} bootstrap replicates skipped")
    eta = np.mean(etas, axis=0)
    eta = np.clip(eta, 0.0, 1.0)
    eta = eta / eta.sum()
    quad = assemble_quadratic(stats)
    return WeightSolution(t=stats.t, a=stats.a, eta=eta, site_ids=stats.site_ids,
                          lam=float(lam), chi_sq=quad.chi_sq,
                          objective=quad.q_value(eta[1:], lam), kkt_gap=float(np.max(gaps)))


# ---------------------------------------------------------------------------
# federated estimate and variance


def fed_estimate(stats: CellStats, weights: WeightSolution) -> EstimateWithCI:
    """Weighted estimate with the four-term plug-in variance.

    The variance splits into the target-row variance of the combined
    anchor/correction term (three terms: two variances and a covariance) and
    one variance term per source site, each scaled by its site proportion.
    The reported variance is floored at the target-only value: the
    asymptotic variance at selected weights is dominated by the target-only
    one, so the floor is a consistent upper bound, and in finite samples it
    absorbs the extra dispersion the data-driven weight selection introduces
    (the plug-in treats weights as fixed). At the target-only vertex the two
    coincide and the floor is inactive.
    """
    eta_src = weights.eta_source()
    theta = weights.eta[0] * stats.theta0 + sum(
        eta_src[i] * stats.theta_site(k) for i, k in enumerate(stats.site_ids)
    )
    vhat = fed_variance(stats, weights.eta)
    e0 = np.zeros(weights.eta.size)
    e0[0] = 1.0
    vhat = max(vhat, fed_variance(stats, e0))
    se = float(np.sqrt(max(vhat, 0.0) / stats.n))
    return EstimateWithCI.from_theta_se(theta, se, stats.n)


def fed_variance(stats: CellStats, eta) -> float:
    """Plug-in asymptotic variance at fixed weights (conditional moments)."""
    eta = np.asarray(eta, dtype=float)
    s = float(np.sum(eta[1:]))
    xi02 = stats.anchor - stats.theta0
    diff = xi02 - stats.xi01
    v1 = float(np.mean(diff**2) - np.mean(diff) ** 2)
    v2 = float(np.mean(xi02**2) - np.mean(xi02) ** 2)
    c12 = float(np.mean(diff * xi02) - np.mean(diff) * np.mean(xi02))
    vhat = ((1 - s) ** 2 * v1 + s**2 * v2 + 2 * (1 - s) * s * c12) / stats.p0
    for i, k in enumerate(stats.site_ids):
        sm = stats.sites[k]
        var_k = sm.sum_sq / sm.n - (sm.sum_aug / sm.n) ** 2
        vhat += eta[1 + i] ** 2 * var_k / stats.p_site(k)
    return vhat


def fed_influence_values(stats: CellStats, eta) -> np.ndarray:
    """Per-observation influence values of the weighted-estimate expansion,
    centered within each site group (target rows first, then sites in id
    order). Their mean square reproduces ``fed_variance`` exactly."""
    eta = np.asarray(eta, dtype=float)
    s = float(np.sum(eta[1:]))
    xi02 = stats.anchor - stats.theta0
    u = (1 - s) * (xi02 - stats.xi01) + s * xi02
    parts = [(u - u.mean()) / stats.p0]
    for i, k in enumerate(stats.site_ids):
        rows = stats.sites[k].aug_rows
        if rows is None:
            raise InvalidInput("per-row augmentation values unavailable")
        parts.append(-eta[1 + i] * (rows - rows.mean()) / stats.p_site(k))
    return np.concatenate(parts)


@dataclass
class FedCurveConfig:
    lambdas: list | None = None
    v_lambda: int = 5
    bootstrap: bool = False
    boot_b: int = 200
    seed: int = 0
    isotonic: bool = True
    fixed_lambda: float | None = None


@dataclass
class FedCurveEstimate:
    """Federated survival curve for one arm with per-time weight diagnostics."""

    grid_points: np.ndarray
    a: int
    site_ids: tuple
    theta: np.ndarray
    theta_corrected: np.ndarray
    se: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    eta: np.ndarray          # (g, K)
    lam: np.ndarray
    chi_sq: np.ndarray       # (g, K-1)
    errors: list = field(default_factory=list)

    def weight_rows(self):
        """Rows (t, a, site, eta, chi_sq, lambda) for the trajectory export."""
        rows = []
        for j, t in enumerate(self.grid_points):
            for pos, site in enumerate((0,) + tuple(self.site_ids)):
                chi = 0.0 if pos == 0 else float(self.chi_sq[j, pos - 1])
                rows.append((float(t), self.a, site, float(self.eta[j, pos]), chi, float(self.lam[j])))
        return rows


def fed_cell(stats: CellStats, config: FedCurveConfig):
    """Pick lambda, solve weights (plain or bootstrap), estimate the cell."""
    lambdas = config.lambdas if config.lambdas is not None else default_lambda_grid(stats.n)
    if config.fixed_lambda is not None:
        lam, flagged = float(config.fixed_lambda), False
    else:
        lam, flagged = choose_lambda(stats, lambdas)
    quad = assemble_quadratic(stats)
    sol = solve_weights(quad, lam, t=stats.t, a=stats.a)
    if config.bootstrap:
        sol = solve_weights_bootstrap(stats, lam, b_reps=config.boot_b, seed=config.seed)
    est = fed_estimate(stats, sol)
    return sol, est, flagged


def fed_curve_from_stats(stats_by_t, grid_points, a, site_ids, config: FedCurveConfig) -> FedCurveEstimate:
    """Run the per-cell pipeline over a time grid and isotonize the result."""
    g = len(grid_points)
    kk = len(site_ids)
    out = FedCurveEstimate(
        grid_points=np.asarray(grid_points, dtype=float), a=int(a), site_ids=tuple(site_ids),
        theta=np.full(g, np.nan), theta_corrected=np.full(g, np.nan),
        se=np.full(g, np.nan), ci_lo=np.full(g, np.nan), ci_hi=np.full(g, np.nan),
        eta=np.full((g, kk + 1), np.nan), lam=np.full(g, np.nan),
        chi_sq=np.full((g, kk), np.nan),
    )
    for j, t in enumerate(grid_points):
        try:
            stats = stats_by_t(float(t))
            sol, est, _ = fed_cell(stats, config)
        except Exception as exc:  # per-t failures leave a hole, curve continues
            out.errors.append((float(t), repr(exc)))
            continue
        out.theta[j] = est.theta
        out.se[j] = est.se
        out.ci_lo[j], out.ci_hi[j] = est.ci_lo, est.ci_hi
        out.eta[j] = sol.eta
        out.lam[j] = sol.lam
        out.chi_sq[j] = sol.chi_sq
    # forward-fill per-t failures so isotonic correction sees a full sequence
    filled = out.theta.copy()
    last = 1.0
    for j in range(g):
        if np.isfinite(filled[j]):
            last = filled[j]
        else:
            filled[j] = last
    if config.isotonic:
        out.theta_corrected = np.clip(pava_non_increasing(filled), 0.0, 1.0)
    else:
        out.theta_corrected = filled
    return out
