"""Command-line surface: simulate, estimate, coordinator, site, report.

Config precedence is CLI flag > config file > built-in default; the
effective configuration is echoed into every output directory. The seed is
mandatory everywhere so runs can be replayed; exit codes are 0 (clean),
2 (degraded but valid output) and 1 (fatal).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import socket
import sys

import numpy as np

from .bundle import CCOD, FEDERATED, POOLED_SHARING, build_nuisance_bundle
from .curves import TimeGrid
from .data import Dataset
from .eif import CCOD_EST, TGT
from .errors import InvalidInput, SurvfedError
from .fednet import (
    FedNetConfig,
    TcpTransport,
    centralized_fed_curves,
    coordinator_run,
    site_run,
)
from .folds import make_folds
from .simbench import (
    BenchConfig,
    METHODS,
    SCENARIOS,
    ScenarioSpec,
    gen_dataset,
    monte_carlo,
    write_report_csvs,
)


def _load_config_file(path):
    if not path:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _effective(args, file_cfg, key, default):
    cli_val = getattr(args, key, None)
    if cli_val is not None:
        return cli_val
    if key in file_cfg:
        return file_cfg[key]
    return default


def _echo_config(outdir, config: dict):
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "run_config.json"), "w") as fh:
        json.dump(config, fh, indent=2, sort_keys=True, default=str)


def _parse_hostport(text):
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise InvalidInput(f"expected host:port, got {text!r}")
    return host, int(port)


def cmd_simulate(args) -> int:
    cfg_file = _load_config_file(args.config)
    scenario = _effective(args, cfg_file, "scenario", "homogeneous")
    reps = int(_effective(args, cfg_file, "reps", 200))
    if reps < 1:
        print("error: --reps must be >= 1", file=sys.stderr)
        return 1
    spec = ScenarioSpec(
        scenario=scenario,
        n0=int(_effective(args, cfg_file, "n0", 300)),
        n_source=int(_effective(args, cfg_file, "nk", 600)),
        k_sites=int(_effective(args, cfg_file, "sites", 5)),
    )
    lambdas = _effective(args, cfg_file, "lambdas", None)
    bench = BenchConfig(
        m_folds=int(_effective(args, cfg_file, "m_folds", 5)),
        v_lambda=int(_effective(args, cfg_file, "v_lambda", 5)),
        eta_cap=float(_effective(args, cfg_file, "eta_cap", 20.0)),
        boot_b=int(_effective(args, cfg_file, "boot_b", 200)),
        sharing=str(_effective(args, cfg_file, "sharing", "pooled")),
        eval_times=tuple(float(t) for t in _effective(args, cfg_file, "eval_times", (30, 60, 90))),
        lambdas=[float(v) for v in lambdas] if lambdas else None,
        methods=tuple(_effective(args, cfg_file, "methods", METHODS)),
    )
    outdir = args.outdir
    _echo_config(outdir, {
        "command": "simulate", "scenario": spec.scenario, "n0": spec.n0, "nk": spec.n_source,
        "sites": spec.k_sites, "reps": reps, "seed": args.seed, "n_super": args.nsuper,
        "jobs": args.jobs, "bench": vars(bench) | {"eval_times": list(bench.eval_times),
                                                   "methods": list(bench.methods)},
    })
    if args.dump_data:
        gen_dataset(spec, int(args.seed)).to_csv(os.path.join(outdir, "dataset_rep0.csv"))
    progress = None
    if args.verbose:
        def progress(done, total):
            print(f"\rreplicate {done}/{total}", end="", file=sys.stderr, flush=True)
    report = monte_carlo(spec, reps, bench, int(args.seed), n_super=int(args.nsuper),
                         jobs=int(args.jobs), progress=progress)
    if args.verbose:
        print(file=sys.stderr)
    write_report_csvs(report, outdir)
    if report.failures:
        print(f"completed with {len(report.failures)} degraded replicates "
              f"({report.reps_used}/{reps} used)", file=sys.stderr)
        return 2
    return 0


def _write_curves_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["method", "t", "a", "estimate", "corrected",
                                                "se", "ci_lo", "ci_hi", "ci_missing"])
        writer.writeheader()
        writer.writerows(rows)


def cmd_estimate(args) -> int:
    cfg_file = _load_config_file(args.config)
    data = Dataset.from_csv(args.data)
    tau = float(_effective(args, cfg_file, "tau", min(200.0, float(data.y.max()))))
    step = float(_effective(args, cfg_file, "step", 1.0))
    grid = TimeGrid.regular(tau, step)
    seed = int(args.seed)
    m_folds = int(_effective(args, cfg_file, "m_folds", 5))
    eta_cap = float(_effective(args, cfg_file, "eta_cap", 20.0))
    outdir = args.outdir
    _echo_config(outdir, {"command": "estimate", "data": args.data, "tau": tau, "step": step,
                          "seed": seed, "m_folds": m_folds, "eta_cap": eta_cap,
                          "bootstrap": bool(args.bootstrap)})

    from .curves import isotonic_correct, StepCurve, CurveKind
    from .eif import EifEngine

    rows = []
    k_sites = data.n_sites
    degraded = False

    def add_curve(method, table_engine, estimator):
        theta = np.empty(len(grid))
        entries = []
        for j, t in enumerate(grid.points):
            cell = table_engine.cell(float(t), arm, (estimator,))[estimator]
            n = cell.phi.size
            se = float(np.sqrt(np.mean(cell.phi_centered**2) / n))
            theta[j] = min(max(cell.theta, 0.0), 1.0)
            entries.append((float(t), theta[j], se))
        corrected = isotonic_correct(StepCurve(grid, theta, CurveKind.SURVIVAL)).values
        for j, (t, th, se) in enumerate(entries):
            missing = se == 0.0
            rows.append(dict(method=method, t=t, a=arm, estimate=th,
                             corrected=float(corrected[j]), se=se,
                             ci_lo=max(th - 1.96 * se, 0.0), ci_hi=min(th + 1.96 * se, 1.0),
                             ci_missing=missing))

    try:
        site_engines = {}
        for k in range(k_sites):
            view = data.subset(data.site_rows(k)).relabel_single_site()
            bundle = build_nuisance_bundle(view, make_folds(view, m_folds, seed), grid,
                                           mode=FEDERATED, seed=seed, eta_cap=eta_cap)
            site_engines[k] = EifEngine(bundle, view)
        pool_engine = ccod_engine = None
        if k_sites > 1:
            pooled = data.relabel_single_site()
            pool_bundle = build_nuisance_bundle(pooled, make_folds(pooled, m_folds, seed),
                                                grid, mode=FEDERATED, seed=seed, eta_cap=eta_cap)
            pool_engine = EifEngine(pool_bundle, pooled)
            ccod_bundle = build_nuisance_bundle(
                data, make_folds(data, m_folds, seed), grid, mode=CCOD,
                sharing=POOLED_SHARING, seed=seed, eta_cap=eta_cap)
            ccod_engine = EifEngine(ccod_bundle, data)
        for arm in (0, 1):
            add_curve("TGT", site_engines[0], TGT)
            if k_sites > 1:
                add_curve("POOL", pool_engine, TGT)
                add_curve("CCOD", ccod_engine, CCOD_EST)
                # inverse-variance pooling of the unadjusted per-site estimates
                ivw = []
                for t in grid.points:
                    num = den = 0.0
                    for k in range(k_sites):
                        cell = site_engines[k].cell(float(t), arm, (TGT,))[TGT]
                        se_k = float(np.sqrt(np.mean(cell.phi_centered**2) / cell.phi.size))
                        w = 1.0 / max(se_k, 1e-8) ** 2
                        num += w * cell.theta
                        den += w
                    ivw.append((min(max(num / den, 0.0), 1.0), float(np.sqrt(1.0 / den))))
                theta_ivw = np.array([v[0] for v in ivw])
                corrected_ivw = isotonic_correct(StepCurve(grid, theta_ivw, CurveKind.SURVIVAL)).values
                for j, t in enumerate(grid.points):
                    th, se = ivw[j]
                    rows.append(dict(method="IVW", t=float(t), a=arm, estimate=th,
                                     corrected=float(corrected_ivw[j]), se=se,
                                     ci_lo=max(th - 1.96 * se, 0.0),
                                     ci_hi=min(th + 1.96 * se, 1.0), ci_missing=se == 0.0))
        if k_sites > 1:
            fed_cfg = FedNetConfig(m_folds=m_folds, eta_cap=eta_cap, seed=seed)
            curves = centralized_fed_curves(data, grid, fed_cfg,
                                            bootstrap=bool(args.bootstrap))
            weight_rows = []
            for arm, fc in curves.items():
                for j, t in enumerate(fc.grid_points):
                    rows.append(dict(method="FED", t=float(t), a=arm,
                                     estimate=float(fc.theta[j]),
                                     corrected=float(fc.theta_corrected[j]),
                                     se=float(fc.se[j]), ci_lo=float(fc.ci_lo[j]),
                                     ci_hi=float(fc.ci_hi[j]),
                                     ci_missing=bool(not np.isfinite(fc.se[j]) or fc.se[j] == 0)))
                weight_rows.extend(fc.weight_rows())
                degraded = degraded or bool(fc.errors)
            with open(os.path.join(outdir, "fed_weights.csv"), "w", newline="") as fh:
                writer = csv.writer(fh)
                writer.writerow(["t", "a", "site", "eta", "chi_sq", "lambda"])
                writer.writerows(weight_rows)
        else:
            print("single-site input: federated estimation skipped", file=sys.stderr)
    except SurvfedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _write_curves_csv(os.path.join(outdir, "curves.csv"), rows)
    return 2 if degraded else 0


def cmd_coordinator(args) -> int:
    data = Dataset.from_csv(args.data)
    if int(np.unique(data.r).size) != 1 or int(data.r[0]) != 0:
        print("error: coordinator data must contain only target-site rows (r=0)", file=sys.stderr)
        return 1
    grid = TimeGrid.regular(float(args.tau), float(args.step))
    config = FedNetConfig(m_folds=int(args.m_folds), eta_cap=float(args.eta_cap),
                          seed=int(args.seed), timeout=float(args.timeout_ms) / 1000.0)
    outdir = args.outdir
    _echo_config(outdir, {"command": "coordinator", "listen": args.listen, "sites": args.sites,
                          "transport": args.transport, "site_data": args.site_data,
                          "tau": args.tau, "step": args.step, "seed": args.seed,
                          "timeout_ms": args.timeout_ms})
    missing = 0
    if args.transport == "loopback":
        # in-process federation: the coordinator spawns every site worker from
        # local CSVs over loopback transports (simulation/testing binding)
        import threading

        from .fednet import LoopbackTransport, site_run

        if not args.site_data:
            print("error: --transport loopback requires --site-data", file=sys.stderr)
            return 1
        transports, threads = [], []
        for path in args.site_data.split(","):
            site_view = Dataset.from_csv(path.strip())
            coord_end, site_end = LoopbackTransport.pair()
            transports.append(coord_end)
            th = threading.Thread(target=site_run, args=(site_view, site_end, config))
            th.start()
            threads.append(th)
        result = coordinator_run(data, transports, grid, config)
        for th in threads:
            th.join()
    else:
        if int(args.sites) < 1:
            print("error: --sites must be positive for tcp transport", file=sys.stderr)
            return 1
        host, port = _parse_hostport(args.listen)
        server = socket.create_server((host, port))
        server.settimeout(config.timeout)
        transports = []
        try:
            for _ in range(int(args.sites)):
                try:
                    conn, _addr = server.accept()
                    transports.append(TcpTransport(conn))
                except socket.timeout:
                    missing += 1
            result = coordinator_run(data, transports, grid, config)
        finally:
            server.close()
    for _ in range(missing):
        result.dropped_sites.append(("<never connected>", "accept timed out"))
    rows = []
    for arm, fc in result.curves.items():
        for j, t in enumerate(fc.grid_points):
            rows.append(dict(method="FED", t=float(t), a=arm, estimate=float(fc.theta[j]),
                             corrected=float(fc.theta_corrected[j]), se=float(fc.se[j]),
                             ci_lo=float(fc.ci_lo[j]), ci_hi=float(fc.ci_hi[j]),
                             ci_missing=bool(not np.isfinite(fc.se[j]))))
    _write_curves_csv(os.path.join(outdir, "fed_curve.csv"), rows)
    with open(os.path.join(outdir, "transcript.jsonl"), "w") as fh:
        for entry in result.transcript:
            fh.write(json.dumps(entry) + "\n")
    if result.dropped_sites:
        print(f"degraded: dropped sites {result.dropped_sites}", file=sys.stderr)
        return 2
    return 0


def cmd_site(args) -> int:
    data = Dataset.from_csv(args.data)
    host, port = _parse_hostport(args.connect)
    transport = TcpTransport.connect(host, port, timeout=float(args.timeout_ms) / 1000.0)
    config = FedNetConfig(timeout=float(args.timeout_ms) / 1000.0)
    try:
        site_run(data, transport, config)
    except SurvfedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


def cmd_report(args) -> int:
    """Summarize a raw per-replicate CSV into the panel table."""
    acc = {}
    with open(args.raw) as fh:
        for row in csv.DictReader(fh):
            key = (row["scenario"], row["method"], float(row["t"]), int(row["a"]))
            missing = row["ci_missing"] in ("True", "true", "1")
            truth = float(row["truth"])
            est = float(row["estimate"])
            cover = (not missing) and float(row["ci_lo"]) <= truth <= float(row["ci_hi"])
            acc.setdefault(key, []).append((est - truth, float(row["ci_hi"]) - float(row["ci_lo"]),
                                            cover, missing, truth))
    rmse_tgt = {}
    for (scenario, method, t, a), vals in acc.items():
        if method == "TGT":
            rmse_tgt[(scenario, t, a)] = float(np.sqrt(np.mean([v[0] ** 2 for v in vals])))
    with open(args.out, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["scenario", "method", "t", "a", "n", "bias_mean",
                                                "bias_sd", "rmse", "rrmse", "ci_width", "cp",
                                                "n_ci", "truth"])
        writer.writeheader()
        for (scenario, method, t, a), vals in sorted(acc.items()):
            bias = np.array([v[0] for v in vals])
            width = np.array([v[1] for v in vals])
            cover = np.array([v[2] for v in vals])
            missing = np.array([v[3] for v in vals])
            rmse = float(np.sqrt(np.mean(bias**2)))
            denom = rmse_tgt.get((scenario, t, a))
            n_ci = int((~missing).sum())
            writer.writerow(dict(
                scenario=scenario, method=method, t=t, a=a, n=len(vals),
                bias_mean=float(bias.mean()), bias_sd=float(bias.std()), rmse=rmse,
                rrmse=(rmse / denom) if denom else "", ci_width=float(width[~missing].mean()) if n_ci else "",
                cp=float(100 * cover[~missing].mean()) if n_ci else "", n_ci=n_ci, truth=vals[0][4],
            ))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="survfed",
                                     description="Multi-source causal survival analysis")
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("simulate", help="run the Monte Carlo benchmark")
    p_sim.add_argument("--scenario", choices=SCENARIOS, default=None)
    p_sim.add_argument("--reps", type=int, default=None)
    p_sim.add_argument("--n0", type=int, default=None)
    p_sim.add_argument("--nk", type=int, default=None)
    p_sim.add_argument("--sites", type=int, default=None)
    p_sim.add_argument("--m-folds", dest="m_folds", type=int, default=None)
    p_sim.add_argument("--eta-cap", dest="eta_cap", type=float, default=None)
    p_sim.add_argument("--boot-b", dest="boot_b", type=int, default=None)
    p_sim.add_argument("--sharing", choices=("pooled", "coarse"), default=None)
    p_sim.add_argument("--nsuper", type=int, default=1_000_000)
    p_sim.add_argument("--jobs", type=int, default=1)
    p_sim.add_argument("--seed", type=int, required=True)
    p_sim.add_argument("--outdir", required=True)
    p_sim.add_argument("--config", default=None)
    p_sim.add_argument("--dump-data", action="store_true")
    p_sim.add_argument("--verbose", action="store_true")
    p_sim.set_defaults(func=cmd_simulate)

    p_est = sub.add_parser("estimate", help="estimate survival curves from a CSV")
    p_est.add_argument("--data", required=True)
    p_est.add_argument("--tau", type=float, default=None)
    p_est.add_argument("--step", type=float, default=None)
    p_est.add_argument("--m-folds", dest="m_folds", type=int, default=None)
    p_est.add_argument("--eta-cap", dest="eta_cap", type=float, default=None)
    p_est.add_argument("--bootstrap", action="store_true")
    p_est.add_argument("--seed", type=int, required=True)
    p_est.add_argument("--outdir", required=True)
    p_est.add_argument("--config", default=None)
    p_est.set_defaults(func=cmd_estimate)

    p_coord = sub.add_parser("coordinator", help="run the federated coordinator (target site)")
    p_coord.add_argument("--listen", default="127.0.0.1:0", help="host:port to listen on (tcp)")
    p_coord.add_argument("--sites", type=int, default=0, help="number of source sites expected (tcp)")
    p_coord.add_argument("--transport", choices=("tcp", "loopback"), default="tcp")
    p_coord.add_argument("--site-data", dest="site_data", default=None,
                         help="comma-separated site CSVs (loopback transport only)")
    p_coord.add_argument("--data", required=True, help="target-site CSV (r=0 rows)")
    p_coord.add_argument("--tau", type=float, default=200.0)
    p_coord.add_argument("--step", type=float, default=1.0)
    p_coord.add_argument("--m-folds", dest="m_folds", type=int, default=5)
    p_coord.add_argument("--eta-cap", dest="eta_cap", type=float, default=20.0)
    p_coord.add_argument("--timeout-ms", dest="timeout_ms", type=float, default=60000.0)
    p_coord.add_argument("--seed", type=int, required=True)
    p_coord.add_argument("--outdir", required=True)
    p_coord.set_defaults(func=cmd_coordinator)

    p_site = sub.add_parser("site", help="run a source-site worker")
    p_site.add_argument("--connect", required=True, help="coordinator host:port")
    p_site.add_argument("--data", required=True, help="this site's CSV")
    p_site.add_argument("--timeout-ms", dest="timeout_ms", type=float, default=60000.0)
    p_site.set_defaults(func=cmd_site)

    p_rep = sub.add_parser("report", help="summarize a raw simulation CSV")
    p_rep.add_argument("--raw", required=True)
    p_rep.add_argument("--out", required=True)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except InvalidInput as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except SurvfedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
