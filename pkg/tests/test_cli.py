import csv
import json
import socket
import subprocess
import sys
import threading

import numpy as np
import pytest

from survfed.cli import main
from survfed.curves import TimeGrid
from survfed.fednet import FedNetConfig, centralized_fed_curves
from survfed.simbench import ScenarioSpec, gen_dataset


def run_cli(*argv):
    return main(list(argv))


def test_simulate_writes_expected_outputs(tmp_path):
    out = tmp_path / "sim"
    code = run_cli(
        "simulate", "--scenario", "homogeneous", "--reps", "2", "--n0", "60", "--nk", "60",
        "--sites", "2", "--m-folds", "3", "--boot-b", "3", "--nsuper", "100000",
        "--seed", "7", "--outdir", str(out),
    )
    assert code == 0
    summary = out / "summary_homogeneous.csv"
    with open(summary) as fh:
        rows = list(csv.DictReader(fh))
    methods = {r["method"] for r in rows}
    assert methods == {"TGT", "POOL", "IVW", "FED", "FED_BOOT", "CCOD"}
    assert len(rows) == 6 * 3 * 2  # methods x times x arms
    assert (out / "run_config.json").exists()
    assert (out / "raw_homogeneous.csv").exists()
    assert (out / "weights_homogeneous.csv").exists()


def test_simulate_deterministic_outputs(tmp_path):
    args = ["simulate", "--scenario", "homogeneous", "--reps", "2", "--n0", "60", "--nk", "60",
            "--sites", "2", "--m-folds", "3", "--boot-b", "3", "--nsuper", "100000", "--seed", "7"]
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert run_cli(*args, "--outdir", str(out1)) == 0
    assert run_cli(*args, "--outdir", str(out2)) == 0
    assert (out1 / "raw_homogeneous.csv").read_text() == (out2 / "raw_homogeneous.csv").read_text()


def test_simulate_rejects_zero_reps(tmp_path):
    code = run_cli("simulate", "--reps", "0", "--seed", "1", "--outdir", str(tmp_path / "x"))
    assert code == 1


def test_seed_is_mandatory():
    with pytest.raises(SystemExit):
        run_cli("simulate", "--reps", "1", "--outdir", "/tmp/nope")


def test_estimate_roundtrip_matches_direct_computation(tmp_path):
    data = gen_dataset(ScenarioSpec("homogeneous", k_sites=3, n0=60, n_source=70), 19)
    csv_path = tmp_path / "data.csv"
    data.to_csv(csv_path)
    out = tmp_path / "est"
    code = run_cli("estimate", "--data", str(csv_path), "--tau", "60", "--step", "10",
                   "--m-folds", "3", "--seed", "19", "--outdir", str(out))
    assert code == 0
    with open(out / "curves.csv") as fh:
        all_rows = list(csv.DictReader(fh))
    assert {r["method"] for r in all_rows} == {"TGT", "POOL", "IVW", "CCOD", "FED"}
    rows = [r for r in all_rows if r["method"] == "FED" and r["a"] == "1"]
    grid = TimeGrid.regular(60.0, 10.0)
    config = FedNetConfig(m_folds=3, v_ens=3, v_lambda=5, seed=19)
    direct = centralized_fed_curves(data, grid, config)[1]
    got = np.array([float(r["estimate"]) for r in sorted(rows, key=lambda r: float(r["t"]))])
    assert np.nanmax(np.abs(got - direct.theta)) < 1e-12
    assert (out / "fed_weights.csv").exists()


def test_estimate_single_site_skips_federation(tmp_path, capsys):
    data = gen_dataset(ScenarioSpec("homogeneous", k_sites=1, n0=60), 5)
    csv_path = tmp_path / "one.csv"
    data.to_csv(csv_path)
    out = tmp_path / "est1"
    code = run_cli("estimate", "--data", str(csv_path), "--tau", "60", "--step", "20",
                   "--m-folds", "3", "--seed", "5", "--outdir", str(out))
    assert code == 0
    err = capsys.readouterr().err
    assert "skipped" in err
    with open(out / "curves.csv") as fh:
        methods = {r["method"] for r in csv.DictReader(fh)}
    assert methods == {"TGT"}


def test_estimate_malformed_row_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("x1,a,y,delta,r\n1.0,1,2.0,1,0\n1.0,0,2.0,2,0\n")
    code = run_cli("estimate", "--data", str(path), "--seed", "1",
                   "--outdir", str(tmp_path / "o"))
    assert code == 1
    assert ":3" in capsys.readouterr().err


def test_report_command_round_trips_summary(tmp_path):
    out = tmp_path / "sim"
    run_cli("simulate", "--scenario", "homogeneous", "--reps", "2", "--n0", "60", "--nk", "60",
            "--sites", "2", "--m-folds", "3", "--boot-b", "3", "--nsuper", "100000",
            "--seed", "7", "--outdir", str(out))
    re_out = tmp_path / "resummary.csv"
    code = run_cli("report", "--raw", str(out / "raw_homogeneous.csv"), "--out", str(re_out))
    assert code == 0
    with open(out / "summary_homogeneous.csv") as fh:
        ref = {(r["method"], r["t"], r["a"]): r for r in csv.DictReader(fh)}
    with open(re_out) as fh:
        got = {(r["method"], r["t"], r["a"]): r for r in csv.DictReader(fh)}
    assert set(ref) == set(got)
    for key in ref:
        assert float(ref[key]["rmse"]) == pytest.approx(float(got[key]["rmse"]), abs=1e-12)


def test_coordinator_and_site_over_tcp(tmp_path):
    data = gen_dataset(ScenarioSpec("homogeneous", k_sites=3, n0=60, n_source=60), 23)
    tgt_csv = tmp_path / "target.csv"
    data.subset(data.site_rows(0)).to_csv(tgt_csv)
    site_csvs = []
    for k in (1, 2):
        p = tmp_path / f"site{k}.csv"
        data.subset(data.site_rows(k)).to_csv(p)
        site_csvs.append(p)
    with socket.create_server(("127.0.0.1", 0)) as probe:
        port = probe.getsockname()[1]
    out = tmp_path / "coord"

    results = {}

    def run_coord():
        results["code"] = run_cli(
            "coordinator", "--listen", f"127.0.0.1:{port}", "--sites", "2",
            "--data", str(tgt_csv), "--tau", "40", "--step", "20", "--m-folds", "3",
            "--timeout-ms", "30000", "--seed", "23", "--outdir", str(out),
        )

    coord = threading.Thread(target=run_coord)
    coord.start()
    procs = []
    import time

    time.sleep(0.7)
    for p in site_csvs:
        procs.append(subprocess.Popen(
            [sys.executable, "-m", "survfed.cli", "site", "--connect", f"127.0.0.1:{port}",
             "--data", str(p), "--timeout-ms", "30000"],
        ))
    coord.join(timeout=120)
    for proc in procs:
        assert proc.wait(timeout=60) == 0
    assert results["code"] == 0
    assert (out / "fed_curve.csv").exists()
    assert (out / "transcript.jsonl").exists()
    transcript = [json.loads(line) for line in (out / "transcript.jsonl").read_text().splitlines()]
    assert {e["kind"] for e in transcript} >= {"hello", "covariate_summary", "augmentation_moments"}


def test_coordinator_loopback_transport_matches_centralized(tmp_path):
    data = gen_dataset(ScenarioSpec("homogeneous", k_sites=3, n0=60, n_source=60), 31)
    tgt_csv = tmp_path / "target.csv"
    data.subset(data.site_rows(0)).to_csv(tgt_csv)
    paths = []
    for k in (1, 2):
        p = tmp_path / f"site{k}.csv"
        data.subset(data.site_rows(k)).to_csv(p)
        paths.append(str(p))
    out = tmp_path / "loop"
    code = run_cli("coordinator", "--transport", "loopback", "--data", str(tgt_csv),
                   "--site-data", ",".join(paths), "--tau", "40", "--step", "20",
                   "--m-folds", "3", "--seed", "31", "--outdir", str(out))
    assert code == 0
    grid = TimeGrid.regular(40.0, 20.0)
    config = FedNetConfig(m_folds=3, seed=31)
    direct = centralized_fed_curves(data, grid, config)[1]
    with open(out / "fed_curve.csv") as fh:
        rows = [r for r in csv.DictReader(fh) if r["a"] == "1"]
    got = np.array([float(r["estimate"]) for r in sorted(rows, key=lambda r: float(r["t"]))])
    assert np.nanmax(np.abs(got - direct.theta)) <= 1e-10


def test_coordinator_exit_degraded_when_site_missing(tmp_path):
    data = gen_dataset(ScenarioSpec("homogeneous", k_sites=3, n0=60, n_source=60), 29)
    tgt_csv = tmp_path / "target.csv"
    data.subset(data.site_rows(0)).to_csv(tgt_csv)
    site_csv = tmp_path / "site1.csv"
    data.subset(data.site_rows(1)).to_csv(site_csv)
    with socket.create_server(("127.0.0.1", 0)) as probe:
        port = probe.getsockname()[1]
    out = tmp_path / "coorddeg"
    results = {}

    def run_coord():
        results["code"] = run_cli(
            "coordinator", "--listen", f"127.0.0.1:{port}", "--sites", "2",
            "--data", str(tgt_csv), "--tau", "40", "--step", "20", "--m-folds", "3",
            "--timeout-ms", "2500", "--seed", "29", "--outdir", str(out),
        )

    coord = threading.Thread(target=run_coord)
    coord.start()
    import time

    time.sleep(0.5)
    proc = subprocess.Popen(
        [sys.executable, "-m", "survfed.cli", "site", "--connect", f"127.0.0.1:{port}",
         "--data", str(site_csv), "--timeout-ms", "30000"],
    )
    coord.join(timeout=120)
    assert proc.wait(timeout=60) == 0
    assert results["code"] == 2  # one expected site never connected
    assert (out / "fed_curve.csv").exists()
