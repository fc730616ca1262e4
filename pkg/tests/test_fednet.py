import socket
import threading

import numpy as np
import pytest

from survfed.curves import TimeGrid
from survfed.errors import ProtocolError
from survfed.fednet import (
    FedNetConfig,
    LoopbackTransport,
    Message,
    TcpTransport,
    audit_privacy,
    centralized_fed_curves,
    coordinator_run,
    deserialize_survival_model,
    moments_to_payload,
    payload_to_moments,
    serialize_survival_model,
    site_cell_moments,
    site_run,
)
from survfed.fedopt import SiteMoments
from survfed.models import SiteCovariateSummary, fit_survival_ensemble
from survfed.rng import substream
from survfed.simbench import ScenarioSpec, gen_dataset

CONFIG = FedNetConfig(m_folds=3, v_ens=2, v_lambda=3, seed=5, timeout=60.0)
GRID = TimeGrid.regular(60.0, 10.0)


def make_data(seed=21, n0=80, nk=90, sites=5, scenario="homogeneous"):
    return gen_dataset(ScenarioSpec(scenario, k_sites=sites, n0=n0, n_source=nk), seed)


def run_federation(data, config=CONFIG, grid=GRID, drop_sites=()):
    transports, threads = [], []
    for k in range(1, data.n_sites):
        coord_end, site_end = LoopbackTransport.pair()
        transports.append(coord_end)
        if k in drop_sites:
            site_end.close()
            continue
        view = data.subset(data.site_rows(k))
        th = threading.Thread(target=site_run, args=(view, site_end, config))
        th.start()
        threads.append(th)
    result = coordinator_run(data.subset(data.site_rows(0)), transports, grid, config)
    for th in threads:
        th.join()
    return result


def test_message_codec_roundtrip():
    msg = Message("hello", 3, {"n": 10, "d": 2})
    back = Message.decode(msg.encode())
    assert back.kind == "hello" and back.site == 3 and back.payload == {"n": 10, "d": 2}


def test_message_version_mismatch():
    bad = Message("hello", 1, {"n": 1, "d": 1}, v=99).encode()
    with pytest.raises(ProtocolError, match="version"):
        Message.decode(bad)


def test_message_unknown_field_rejected():
    line = '{"v": 1, "kind": "covariate_summary", "site": 1, "payload": {"site": 1, "n": 5, "mean": [], "cov": [], "raw_rows": []}}'
    with pytest.raises(ProtocolError, match="unexpected"):
        Message.decode(line)


def test_model_serialization_roundtrip_exact():
    rng = substream(1, "ser")
    n = 120
    x = rng.normal(size=(n, 3))
    a = rng.integers(0, 2, n)
    y = rng.exponential(20, n)
    delta = rng.integers(0, 2, n)
    for force in (None, "km", "km_strat"):
        if force is None:
            fit = fit_survival_ensemble(x, a, y, delta, rng=substream(1, "cv"), tau=60.0)
        else:
            from survfed.models import _fit_marginal_km, _fit_stratified_km

            fitter = _fit_marginal_km if force == "km" else _fit_stratified_km
            fit = fit_survival_ensemble(x, a, y, delta, candidates=[(force, fitter)])
        import json

        payload = json.loads(json.dumps(serialize_survival_model(fit)))
        model = deserialize_survival_model(payload)
        pts = GRID.points
        for arm in (0, 1):
            assert np.array_equal(model.survival_matrix(x, arm, pts),
                                  fit.survival_matrix(x, arm, pts))


def test_moment_payload_roundtrip_exact():
    rng = substream(2, "mom")
    cells = {(10.0, 1): SiteMoments.from_rows(rng.normal(size=33), rng.permutation(33) % 3, 3,
                                              keep_rows=False)}
    import json

    payload = json.loads(json.dumps(moments_to_payload(2, cells)))
    back = payload_to_moments(payload)
    sm, ref = back[(10.0, 1)], cells[(10.0, 1)]
    assert sm.sum_aug == ref.sum_aug and sm.sum_sq == ref.sum_sq
    assert np.array_equal(sm.fold_sum, ref.fold_sum)


def test_distributed_equals_centralized_bitwise():
    data = make_data()
    central = centralized_fed_curves(data, GRID, CONFIG)
    result = run_federation(data)
    assert not result.dropped_sites
    for arm in (0, 1):
        c, d = central[arm], result.curves[arm]
        assert np.nanmax(np.abs(c.theta - d.theta)) <= 1e-10
        assert np.nanmax(np.abs(c.se - d.se)) <= 1e-10
        assert np.nanmax(np.abs(c.eta - d.eta)) <= 1e-10
        assert np.nanmax(np.abs(c.chi_sq - d.chi_sq)) <= 1e-10
        assert np.array_equal(c.lam, d.lam)


def test_privacy_audit_clean_transcript():
    data = make_data()
    result = run_federation(data)
    assert audit_privacy(result.transcript, d=data.d, v_folds=CONFIG.v_lambda) == []
    # and the audit actually catches junk
    dirty = result.transcript + [{"dir": "recv", "site": 1, "kind": "covariate_summary",
                                  "payload": {"site": 1, "n": 2, "mean": [1.0], "cov": [[1.0]],
                                              }}]
    assert audit_privacy(dirty, d=data.d, v_folds=CONFIG.v_lambda) != []


def test_site_moments_match_brute_force_recomputation():
    data = make_data()
    view = data.subset(data.site_rows(2))
    target = data.subset(data.site_rows(0))
    model = fit_survival_ensemble(
        target.x, target.a, target.y, target.delta, outcome="event",
        v_folds=CONFIG.v_ens, rng=substream(CONFIG.seed, "ens", 0, "full", "event"),
        tau=float(GRID.tau),
    )
    summary = SiteCovariateSummary.from_rows(0, target.x)
    cells, _ = site_cell_moments(view.x, view.a, view.y, view.delta, 2, GRID, model,
                                 summary, CONFIG)
    for (t, arm), sm in list(cells.items())[:6]:
        assert sm.n == view.n
        # moments must be plain sums of the per-observation values
        assert sm.sum_aug == pytest.approx(float(np.sum(sm.fold_sum)), abs=1e-9)
        assert sm.sum_sq == pytest.approx(float(np.sum(sm.fold_sumsq)), abs=1e-9)


def test_site_moments_deterministic():
    data = make_data()
    view = data.subset(data.site_rows(1))
    target = data.subset(data.site_rows(0))
    model = fit_survival_ensemble(
        target.x, target.a, target.y, target.delta, outcome="event",
        v_folds=CONFIG.v_ens, rng=substream(CONFIG.seed, "ens", 0, "full", "event"),
        tau=float(GRID.tau),
    )
    summary = SiteCovariateSummary.from_rows(0, target.x)
    args = (view.x, view.a, view.y, view.delta, 1, GRID, model, summary, CONFIG)
    c1, _ = site_cell_moments(*args)
    c2, _ = site_cell_moments(*args)
    for key in c1:
        assert c1[key].sum_aug == c2[key].sum_aug
        assert np.array_equal(c1[key].fold_sum, c2[key].fold_sum)


def test_dropped_site_degrades_gracefully():
    data = make_data()
    config = FedNetConfig(m_folds=3, v_ens=2, v_lambda=3, seed=5, timeout=0.5)
    result = run_federation(data, config=config, drop_sites=(3,))
    assert result.degraded
    assert len(result.curves[1].site_ids) == data.n_sites - 2
    assert 3 not in result.curves[1].site_ids
    assert np.all(np.isfinite(result.curves[1].theta))


def test_zero_sites_collapses_to_target_only():
    data = make_data(sites=2)
    config = FedNetConfig(m_folds=3, v_ens=2, v_lambda=3, seed=5, timeout=0.3)
    result = run_federation(data, config=config, drop_sites=(1,))
    assert result.degraded
    curve = result.curves[1]
    assert curve.site_ids == ()
    assert np.all(curve.eta[np.isfinite(curve.eta[:, 0]), 0] == 1.0)
    # equals the single-site centralized computation
    central = centralized_fed_curves(data.subset(data.site_rows(0)), GRID, config)
    assert np.nanmax(np.abs(central[1].theta - curve.theta)) <= 1e-10


def test_tcp_transport_matches_loopback():
    data = make_data(sites=3, n0=60, nk=60)
    config = FedNetConfig(m_folds=3, v_ens=2, v_lambda=3, seed=5, timeout=60.0)
    grid = TimeGrid.regular(40.0, 20.0)
    loop = run_federation(data, config=config, grid=grid)

    server = socket.create_server(("127.0.0.1", 0))
    port = server.getsockname()[1]
    threads = []
    for k in (1, 2):
        view = data.subset(data.site_rows(k))

        def run_site(v=view):
            tr = TcpTransport.connect("127.0.0.1", port, timeout=30.0)
            site_run(v, tr, config)

        th = threading.Thread(target=run_site)
        th.start()
        threads.append(th)
    transports = [TcpTransport(server.accept()[0]) for _ in (1, 2)]
    result = coordinator_run(data.subset(data.site_rows(0)), transports, grid, config)
    for th in threads:
        th.join()
    server.close()
    for arm in (0, 1):
        assert np.nanmax(np.abs(result.curves[arm].theta - loop.curves[arm].theta)) <= 1e-10


def test_coordinator_rejects_nontarget_data():
    data = make_data()
    with pytest.raises(ProtocolError):
        coordinator_run(data, [], GRID, CONFIG)
