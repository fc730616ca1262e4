"""Simulation benchmark: data generation with five site-heterogeneity
scenarios, a super-population truth oracle, the competitor estimators
(TGT, POOL, IVW, FED, FED-BOOT, CCOD) and the Monte Carlo harness.

Covariates are transformed Beta draws; event and censoring times follow
Weibull-type hazards exp(h) * lam * rho * t^(rho-1) with rho = 1.2 and
lam = 0.6, censoring truncated at day 200. Site-specific shifts enter
through five knobs (gamma, D_T, D_C, delta_T, delta_C) per scenario.
"""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .bundle import CCOD, FEDERATED, POOLED_SHARING, build_nuisance_bundle
from .curves import CurveKind, StepCurve, TimeGrid
from .data import Dataset
from .eif import (
    CCOD_EST,
    EifEngine,
    EstimateWithCI,
    TGT,
    build_influence_table,
    estimator_variance,
)
from .errors import InvalidInput
from .fedopt import FedCurveConfig, cell_stats_from_components, fed_cell
from .folds import make_folds
from .rng import substream

RHO = 1.2
LAM = 0.6
CENSOR_CAP = 200.0
SCENARIOS = ("homogeneous", "covariate_shift", "outcome_shift", "censoring_shift", "all_shift")
METHODS = ("TGT", "POOL", "IVW", "FED", "FED_BOOT", "CCOD")


def scenario_knobs(scenario: str, k: int) -> dict:
    """Per-site shift knobs (gamma, d_t, d_c, delta_t, delta_c)."""
    if scenario == "homogeneous":
        return dict(gamma=0, d_t=0, d_c=0, delta_t=0, delta_c=0)
    if scenario == "covariate_shift":
        return dict(gamma=k, d_t=0, d_c=0, delta_t=0, delta_c=0)
    if scenario == "outcome_shift":
        return dict(gamma=0, d_t=k, d_c=0, delta_t=k, delta_c=0)
    if scenario == "censoring_shift":
        return dict(gamma=0, d_t=0, d_c=k, delta_t=0, delta_c=k)
    if scenario == "all_shift":
        return dict(gamma=k, d_t=k, d_c=k, delta_t=k, delta_c=k)
    raise InvalidInput(f"unknown scenario {scenario!r}")


@dataclass
class ScenarioSpec:
    scenario: str = "homogeneous"
    k_sites: int = 5
    n0: int = 300
    n_source: int = 600
    tau: float = CENSOR_CAP

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise InvalidInput(f"unknown scenario {self.scenario!r}")
        if self.k_sites < 1 or self.n0 < 1 or self.n_source < 1:
            raise InvalidInput("site counts and sizes must be positive")

    def site_size(self, k: int) -> int:
        return self.n0 if k == 0 else self.n_source

    def knobs(self, k: int) -> dict:
        return scenario_knobs(self.scenario, k)


def _draw_covariates(knobs, n, rng):
    gamma = knobs["gamma"]
    x1 = 33.0 * rng.beta(1.1 - 0.05 * gamma, 1.1 + 0.2 * gamma, n) + 9.0 + 2.0 * gamma
    x2 = 52.0 * rng.beta(1.5 + (x1 + 0.5 * gamma) / 20.0, 4.0 + 2.0 * gamma, n) + 7.0 + 2.0 * gamma
    x3 = (4.0 + 2.0 * gamma) * rng.beta(1.5 + np.abs(x1 - 50.0 + 3.0 * gamma) / 20.0, 3.0 + 0.1 * gamma, n)
    return np.column_stack([x1, x2, x3])


def propensity_true(x) -> np.ndarray:
    x = np.atleast_2d(x)
    inner = 1.3 + np.exp(-12.0 + x[:, 0] / 10.0) + np.exp(-2.0 + x[:, 1] / 12.0) + np.exp(-2.0 + x[:, 2] / 3.0)
    logit = -1.05 + np.log(inner)
    return 1.0 / (1.0 + np.exp(-logit))


def event_log_hazard(x, a, knobs) -> np.ndarray:
    x = np.atleast_2d(x)
    base = -5.02 + 0.1 * (x[:, 0] - 25.0) - 0.1 * (x[:, 1] - 25.0) + 0.05 * (x[:, 2] - 2.0)
    shift = knobs["d_t"] * 0.1 * (x[:, 1] - 25.0)
    trt = np.asarray(a, dtype=float) * knobs["delta_t"] * 0.1 * (x[:, 0] + x[:, 1] + x[:, 2] - 50.0)
    return base + shift + trt


def censor_log_hazard(x, a, knobs) -> np.ndarray:
    x = np.atleast_2d(x)
    base = -4.87 + 0.01 * (x[:, 0] - 25.0) - 0.02 * (x[:, 1] - 25.0) + 0.01 * (x[:, 2] - 2.0)
    shift = -knobs["d_c"] * 0.1 * (x[:, 1] - 25.0)
    trt = np.asarray(a, dtype=float) * knobs["delta_c"] * 0.1 * (x[:, 0] + x[:, 1] + x[:, 2] - 50.0)
    return base + shift + trt


def _weibull_time(log_hazard, u):
    return (-np.log(u) / (np.exp(log_hazard) * LAM)) ** (1.0 / RHO)


def gen_site(k: int, n_k: int, spec: ScenarioSpec, rng, a_fixed=None):
    """One site's observations; ``a_fixed`` pins the arm (used by the oracle)."""
    knobs = spec.knobs(k)
    x = _draw_covariates(knobs, n_k, rng)
    if a_fixed is None:
        a = (rng.uniform(size=n_k) < propensity_true(x)).astype(np.int64)
    else:
        a = np.full(n_k, int(a_fixed), dtype=np.int64)
    t = _weibull_time(event_log_hazard(x, a, knobs), rng.uniform(size=n_k))
    c = np.minimum(_weibull_time(censor_log_hazard(x, a, knobs), rng.uniform(size=n_k)), CENSOR_CAP)
    y = np.minimum(t, c)
    delta = (t <= c).astype(np.int64)
    r = np.full(n_k, k, dtype=np.int64)
    return x, a, y, delta, r, t


def gen_dataset(spec: ScenarioSpec, seed: int) -> Dataset:
    cols = [gen_site(k, spec.site_size(k), spec, substream(seed, "site", k))[:5]
            for k in range(spec.k_sites)]
    return Dataset(
        x=np.vstack([c[0] for c in cols]),
        a=np.concatenate([c[1] for c in cols]),
        y=np.concatenate([c[2] for c in cols]),
        delta=np.concatenate([c[3] for c in cols]),
        r=np.concatenate([c[4] for c in cols]),
    )


@dataclass
class TruthCurve:
    curve: StepCurve
    se: np.ndarray
    n_super: int
    scaled_down: bool

    def at(self, t: float) -> float:
        return float(self.curve.evaluate(t))


def truth_oracle(spec: ScenarioSpec, grid: TimeGrid, a: int, n_super: int = 1_000_000,
                 seed: int = 0) -> TruthCurve:
    """Super-population survival of the potential event time under the target
    site's distribution (uncensored). The desk default of 1e6 draws is a
    scaled-down stand-in for an effectively exact oracle; the binomial MC
    standard error is reported alongside."""
    if n_super < 10**5:
        raise InvalidInput("oracle population too small")
    rng = substream(seed, "truth", a)
    batch = 2_000_000
    remaining = n_super
    counts = np.zeros(len(grid), dtype=np.int64)
    knobs = spec.knobs(0)
    while remaining > 0:
        m = min(batch, remaining)
        x = _draw_covariates(knobs, m, rng)
        t = _weibull_time(event_log_hazard(x, a, knobs), rng.uniform(size=m))
        t_sorted = np.sort(t)
        counts += t_sorted.size - np.searchsorted(t_sorted, grid.points, side="right")
        remaining -= m
    surv = counts / n_super
    se = np.sqrt(np.maximum(surv * (1.0 - surv), 0.0) / n_super)
    return TruthCurve(
        curve=StepCurve(grid, surv, CurveKind.SURVIVAL), se=se,
        n_super=n_super, scaled_down=n_super < 10**8,
    )


@dataclass
class BenchConfig:
    """Estimation knobs for the benchmark and the estimate command."""

    m_folds: int = 5
    v_ens: int = 3
    v_lambda: int = 5
    eta_cap: float = 20.0
    boot_b: int = 200
    sharing: str = POOLED_SHARING
    eval_times: tuple = (30.0, 60.0, 90.0)
    grid_step: float = 1.0
    tau: float = CENSOR_CAP
    lambdas: list | None = None
    methods: tuple = METHODS

    def grid(self) -> TimeGrid:
        return TimeGrid.regular(self.tau, self.grid_step)


def _single_site_estimates(data: Dataset, grid, config: BenchConfig, seed):
    """Target-only influence estimates on a one-site view of ``data``."""
    folds = make_folds(data, config.m_folds, seed)
    bundle = build_nuisance_bundle(
        data, folds, grid, mode=FEDERATED, sharing=config.sharing,
        seed=seed, eta_cap=config.eta_cap, v_ens=config.v_ens,
    )
    table = build_influence_table(bundle, data, config.eval_times, (0, 1), estimators=(TGT,))
    return {
        (t, a): estimator_variance(table, TGT, t, a)
        for t in config.eval_times for a in (0, 1)
    }


def run_competitors(dataset: Dataset, config: BenchConfig, seed: int):
    """All estimators at the evaluation cells. Per-method failures are
    recorded and the run continues."""
    grid = config.grid()
    cells = [(float(t), a) for t in config.eval_times for a in (0, 1)]
    results: dict = {m: {} for m in config.methods}
    errors: dict = {}
    weights_log: list = []
    k_sites = dataset.n_sites

    # every view is estimated under the same seed so that single-site views,
    # the pooled view and the federated bundle share fold and fit streams;
    # with one site all competitors then coincide exactly
    per_site: dict = {}
    if {"TGT", "IVW"} & set(config.methods):
        for k in range(k_sites):
            view = dataset.subset(dataset.site_rows(k)).relabel_single_site()
            try:
                per_site[k] = _single_site_estimates(view, grid, config, seed)
            except Exception as exc:
                errors[f"site{k}"] = repr(exc)

    if "TGT" in config.methods and 0 in per_site:
        results["TGT"] = dict(per_site[0])

    if "POOL" in config.methods:
        try:
            pooled = dataset.relabel_single_site()
            results["POOL"] = _single_site_estimates(pooled, grid, config, seed)
        except Exception as exc:
            errors["POOL"] = repr(exc)

    if "IVW" in config.methods:
        for cell in cells:
            num, den = 0.0, 0.0
            ok = True
            for k in range(k_sites):
                est = per_site.get(k, {}).get(cell)
                if est is None:
                    ok = False
                    break
                w = 1.0 / max(est.se, 1e-8) ** 2
                num += w * est.theta
                den += w
            if ok and den > 0:
                results["IVW"][cell] = EstimateWithCI.from_theta_se(num / den, np.sqrt(1.0 / den), dataset.n)

    if ({"FED", "FED_BOOT"} & set(config.methods)) and k_sites > 1:
        try:
            folds = make_folds(dataset, config.m_folds, seed)
            bundle = build_nuisance_bundle(
                dataset, folds, grid, mode=FEDERATED, sharing=config.sharing,
                seed=seed, eta_cap=config.eta_cap, v_ens=config.v_ens,
            )
            engine = EifEngine(bundle, dataset)
            for t, a in cells:
                comp = engine.cell_components(t, a)
                stats = cell_stats_from_components(comp, seed=seed, v_folds=config.v_lambda)
                cfg = FedCurveConfig(lambdas=config.lambdas, v_lambda=config.v_lambda, seed=seed)
                if "FED" in config.methods:
                    sol, est, _ = fed_cell(stats, cfg)
                    results["FED"][(t, a)] = est
                    for pos, site in enumerate((0,) + tuple(sol.site_ids)):
                        chi = 0.0 if pos == 0 else float(sol.chi_sq[pos - 1])
                        weights_log.append((t, a, site, float(sol.eta[pos]), chi, sol.lam))
                if "FED_BOOT" in config.methods:
                    cfg_b = FedCurveConfig(lambdas=config.lambdas, v_lambda=config.v_lambda,
                                           bootstrap=True, boot_b=config.boot_b, seed=seed)
                    _, est_b, _ = fed_cell(stats, cfg_b)
                    results["FED_BOOT"][(t, a)] = est_b
        except Exception as exc:
            errors["FED"] = repr(exc)
    elif {"FED", "FED_BOOT"} & set(config.methods) and k_sites == 1 and 0 in per_site:
        # single-site federation degenerates to the target-only estimator
        for m in ("FED", "FED_BOOT"):
            if m in config.methods:
                results[m] = dict(per_site[0])

    if "CCOD" in config.methods:
        try:
            folds = make_folds(dataset, config.m_folds, seed)
            bundle = build_nuisance_bundle(
                dataset, folds, grid, mode=CCOD, sharing=POOLED_SHARING,
                seed=seed, eta_cap=config.eta_cap, v_ens=config.v_ens,
            )
            table = build_influence_table(bundle, dataset, config.eval_times, (0, 1))
            for t, a in cells:
                results["CCOD"][(t, a)] = estimator_variance(table, CCOD_EST, t, a)
        except Exception as exc:
            errors["CCOD"] = repr(exc)

    return results, errors, weights_log


@dataclass
class MetricsReport:
    """Aggregated Monte Carlo metrics per (method, t, a)."""

    scenario: str
    reps_requested: int
    reps_used: int
    rows: list = field(default_factory=list)   # summary dicts
    raw: list = field(default_factory=list)    # per-rep dicts
    weight_rows: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    def summary_by(self, method, t, a):
        for row in self.rows:
            if row["method"] == method and row["t"] == t and row["a"] == a:
                return row
        raise KeyError((method, t, a))


def _one_replicate(args):
    spec, config, seed, rep = args
    rep_seed = int(substream(seed, "repseed", rep).integers(0, 2**62))
    data = gen_dataset(spec, int(substream(seed, "repdata", rep).integers(0, 2**62)))
    results, errors, weights_log = run_competitors(data, config, rep_seed)
    return rep, results, errors, weights_log


def monte_carlo(spec: ScenarioSpec, reps: int, config: BenchConfig, seed: int,
                n_super: int = 1_000_000, jobs: int = 1,
                progress=None) -> MetricsReport:
    """Run the full benchmark: generate, estimate, aggregate.

    Deterministic for fixed ``seed`` regardless of ``jobs``. A replicate that
    fails entirely is logged and excluded; more than 2% failures aborts.
    """
    if reps < 1:
        raise InvalidInput("reps must be positive")
    grid = config.grid()
    truth = {a: truth_oracle(spec, grid, a, n_super=n_super, seed=seed) for a in (0, 1)}
    report = MetricsReport(scenario=spec.scenario, reps_requested=reps, reps_used=0)

    tasks = [(spec, config, seed, rep) for rep in range(reps)]
    interrupted = False
    outcomes = []
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_one_replicate, task) for task in tasks]
            try:
                for i, fut in enumerate(futures):
                    outcomes.append(fut.result())
                    if progress:
                        progress(i + 1, reps)
            except KeyboardInterrupt:
                interrupted = True
                for fut in futures:
                    fut.cancel()
    else:
        try:
            for task in tasks:
                outcomes.append(_one_replicate(task))
                if progress:
                    progress(task[3] + 1, reps)
        except KeyboardInterrupt:
            interrupted = True
    outcomes.sort(key=lambda o: o[0])
    if interrupted:
        report.failures.append(("interrupted", {"completed": len(outcomes)}))

    acc: dict = {}
    for rep, results, errors, weights_log in outcomes:
        if errors:
            report.failures.append((rep, errors))
        usable = any(results[m] for m in config.methods if m in results)
        if not usable:
            continue
        report.reps_used += 1
        for t, a, site, eta, chi, lam in weights_log:
            report.weight_rows.append(dict(rep=rep, t=t, a=a, site=site, eta=eta, chi_sq=chi, lam=lam))
        for method in config.methods:
            for (t, a), est in results.get(method, {}).items():
                tv = truth[a].at(t)
                report.raw.append(dict(
                    scenario=spec.scenario, method=method, t=t, a=a, rep=rep,
                    estimate=est.theta, se=est.se, ci_lo=est.ci_lo, ci_hi=est.ci_hi,
                    ci_missing=est.ci_missing, truth=tv,
                ))
                acc.setdefault((method, t, a), []).append(
                    (est.theta - tv, est.ci_hi - est.ci_lo,
                     (est.ci_lo <= tv <= est.ci_hi) and not est.ci_missing,
                     est.ci_missing)
                )

    if not interrupted and report.reps_used < reps * 0.98 and reps > 1:
        raise RuntimeError(f"too many failed replicates: used {report.reps_used}/{reps}")

    rmse_tgt = {}
    for (method, t, a), vals in acc.items():
        if method == "TGT":
            bias = np.array([v[0] for v in vals])
            rmse_tgt[(t, a)] = float(np.sqrt(np.mean(bias**2)))
    for (method, t, a), vals in sorted(acc.items()):
        bias = np.array([v[0] for v in vals])
        width = np.array([v[1] for v in vals])
        cover = np.array([v[2] for v in vals])
        missing = np.array([v[3] for v in vals])
        rmse = float(np.sqrt(np.mean(bias**2)))
        denom = rmse_tgt.get((t, a))
        n_ci = int((~missing).sum())
        report.rows.append(dict(
            scenario=spec.scenario, method=method, t=t, a=a,
            n=len(vals), bias_mean=float(np.mean(bias)), bias_sd=float(np.std(bias)),
            rmse=rmse, rrmse=(rmse / denom) if denom else np.nan,
            ci_width=float(np.mean(width[~missing])) if n_ci else np.nan,
            cp=float(100.0 * cover[~missing].mean()) if n_ci else np.nan,
            n_ci=n_ci, truth=truth[a].at(t),
        ))
    return report


def write_report_csvs(report: MetricsReport, outdir):
    """Raw per-rep rows, panel summary and weight trajectories as CSVs."""
    import os

    os.makedirs(outdir, exist_ok=True)
    raw_path = os.path.join(outdir, f"raw_{report.scenario}.csv")
    with open(raw_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[
            "scenario", "method", "t", "a", "rep", "estimate", "se", "ci_lo", "ci_hi", "ci_missing", "truth",
        ])
        writer.writeheader()
        writer.writerows(report.raw)
    summary_path = os.path.join(outdir, f"summary_{report.scenario}.csv")
    with open(summary_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=[
            "scenario", "method", "t", "a", "n", "bias_mean", "bias_sd", "rmse", "rrmse",
            "ci_width", "cp", "n_ci", "truth",
        ])
        writer.writeheader()
        writer.writerows(report.rows)
    if report.weight_rows:
        wpath = os.path.join(outdir, f"weights_{report.scenario}.csv")
        with open(wpath, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["rep", "t", "a", "site", "eta", "chi_sq", "lam"])
            writer.writeheader()
            writer.writerows(report.weight_rows)
    return raw_path, summary_path
