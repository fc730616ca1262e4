"""Privacy-preserving coordinator/site protocol.

Sites keep raw data local. The coordinator (which holds the target site's
data) broadcasts its whole-target outcome model and covariate summary; each
site replies with its own covariate summary and, per (time, arm) cell, the
count, sum and sum of squares of its augmentation-term values, broken down
by the shared cross-validation folds. Those moments are sufficient to
reconstruct every site-specific estimate, discrepancy, Gram entry and the
aggregated variance exactly, because products of centered influence values
across two different source sites are supported on target rows only.

Wire format: one JSON object per line, UTF-8, envelope
``{"v": 1, "kind": ..., "site": ..., "payload": {...}}``. Floats are emitted
with shortest-roundtrip precision, so a loopback federation reproduces the
centralized computation bit for bit.
"""

from __future__ import annotations

import json
import queue
import socket
from dataclasses import dataclass, field

import numpy as np

from .bundle import COARSE_SHARING, FEDERATED, build_nuisance_bundle, site_local_nuisances
from .curves import SURVIVAL_FLOOR, CurveKind, StepCurve, TimeGrid
from .data import Dataset
from .eif import EifEngine, build_h_struct
from .errors import ProtocolError, SiteUnavailable
from .fedopt import (
    CellStats,
    FedCurveConfig,
    SiteMoments,
    fed_curve_from_stats,
)
from .folds import make_folds
from .models import (
    CoxSurvivalModel,
    MarginalKMModel,
    SiteCovariateSummary,
    StratifiedKMModel,
    coarse_ratio_or_fallback,
)
from .cox import CoxModel
from .rng import substream

PROTOCOL_VERSION = 1

KINDS = ("hello", "model_broadcast", "covariate_summary", "augmentation_moments", "ack", "error")

# exact payload schema per kind; the privacy audit enforces these
PAYLOAD_FIELDS = {
    "hello": {"n", "d"},
    "model_broadcast": {"model", "target_summary", "grid", "arms", "config"},
    "covariate_summary": {"site", "n", "mean", "cov"},
    "augmentation_moments": {"site", "cells"},
    "ack": set(),
    "error": {"message"},
}
MOMENT_CELL_FIELDS = {"t", "a", "n", "sum_aug", "sum_sq_aug", "fold_n", "fold_sum", "fold_sumsq"}


@dataclass
class Message:
    kind: str
    site: int
    payload: dict
    v: int = PROTOCOL_VERSION

    def encode(self) -> str:
        return json.dumps({"v": self.v, "kind": self.kind, "site": self.site, "payload": self.payload})

    @classmethod
    def decode(cls, line: str) -> "Message":
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise ProtocolError(f"malformed message: {exc}") from None
        for key in ("v", "kind", "site", "payload"):
            if key not in obj:
                raise ProtocolError(f"missing envelope field {key!r}")
        if obj["v"] != PROTOCOL_VERSION:
            raise ProtocolError(f"protocol version {obj['v']} != {PROTOCOL_VERSION}")
        if obj["kind"] not in KINDS:
            raise ProtocolError(f"unknown message kind {obj['kind']!r}")
        extra = set(obj["payload"]) - PAYLOAD_FIELDS[obj["kind"]]
        if extra:
            raise ProtocolError(f"unexpected payload fields {sorted(extra)} in {obj['kind']}")
        return cls(kind=obj["kind"], site=int(obj["site"]), payload=obj["payload"], v=obj["v"])


class LoopbackTransport:
    """In-process transport endpoint backed by a pair of queues."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self.closed = False

    @classmethod
    def pair(cls):
        q1, q2 = queue.Queue(), queue.Queue()
        return cls(q1, q2), cls(q2, q1)

    def send(self, msg: Message):
        self._outbox.put(msg.encode())

    def recv(self, timeout=None) -> Message:
        try:
            line = self._inbox.get(timeout=timeout)
        except queue.Empty:
            raise SiteUnavailable("loopback receive timed out") from None
        if line is None:
            raise SiteUnavailable("peer closed the loopback transport")
        return Message.decode(line)

    def close(self):
        if not self.closed:
            self.closed = True
            self._outbox.put(None)


class TcpTransport:
    """Newline-delimited JSON messages over a TCP socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self._reader = sock.makefile("r", encoding="utf-8")
        self.closed = False

    @classmethod
    def connect(cls, host: str, port: int, timeout=None):
        sock = socket.create_connection((host, port), timeout=timeout)
        return cls(sock)

    def send(self, msg: Message):
        self.sock.sendall((msg.encode() + "\n").encode("utf-8"))

    def recv(self, timeout=None) -> Message:
        self.sock.settimeout(timeout)
        try:
            line = self._reader.readline()
        except (socket.timeout, OSError) as exc:
            raise SiteUnavailable(f"tcp receive failed: {exc}") from None
        if not line:
            raise SiteUnavailable("peer closed the tcp connection")
        return Message.decode(line)

    def close(self):
        if not self.closed:
            self.closed = True
            try:
                self.sock.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            self.sock.close()


# ---------------------------------------------------------------------------
# model serialization (minimal information for source-side survival predictions)


def serialize_survival_model(fit) -> dict:
    model = getattr(fit, "model", fit)
    if isinstance(model, MarginalKMModel):
        return {"tag": "km", "points": model.curve.grid.points.tolist(),
                "values": model.curve.values.tolist()}
    if isinstance(model, StratifiedKMModel):
        return {"tag": "km_strat",
                "arms": {str(arm): {"points": c.grid.points.tolist(), "values": c.values.tolist()}
                         for arm, c in model.curves.items()}}
    if isinstance(model, CoxSurvivalModel):
        cm = model.model
        return {"tag": "cox", "beta": cm.beta.tolist(),
                "baseline_points": cm.baseline_cumhaz.grid.points.tolist(),
                "baseline_values": cm.baseline_cumhaz.values.tolist(),
                "features": list(cm.feature_spec)}
    raise ProtocolError(f"unknown survival model type {type(model)!r}")


def deserialize_survival_model(payload: dict):
    tag = payload["tag"]
    if tag == "km":
        curve = StepCurve(TimeGrid(np.asarray(payload["points"])), np.asarray(payload["values"]),
                          CurveKind.SURVIVAL)
        return MarginalKMModel(curve)
    if tag == "km_strat":
        curves = {int(arm): StepCurve(TimeGrid(np.asarray(spec["points"])), np.asarray(spec["values"]),
                                      CurveKind.SURVIVAL)
                  for arm, spec in payload["arms"].items()}
        return StratifiedKMModel(curves)
    if tag == "cox":
        baseline = StepCurve(TimeGrid(np.asarray(payload["baseline_points"])),
                             np.asarray(payload["baseline_values"]), CurveKind.CUM_HAZARD)
        cm = CoxModel(beta=np.asarray(payload["beta"], dtype=float), baseline_cumhaz=baseline,
                      feature_spec=tuple(payload["features"]))
        return CoxSurvivalModel(cm)
    raise ProtocolError(f"unknown model tag {tag!r}")


# ---------------------------------------------------------------------------
# shared cell computation


@dataclass
class FedNetConfig:
    """Knobs shared by the coordinator and every site."""

    m_folds: int = 5
    v_ens: int = 3
    v_lambda: int = 5
    eta_cap: float = 20.0
    seed: int = 0
    lambdas: list | None = None
    timeout: float = 60.0
    arms: tuple = (0, 1)

    def to_payload(self) -> dict:
        return {"m_folds": self.m_folds, "v_ens": self.v_ens, "v_lambda": self.v_lambda,
                "eta_cap": self.eta_cap, "seed": self.seed,
                "lambdas": self.lambdas, "arms": list(self.arms)}

    @classmethod
    def from_payload(cls, p: dict) -> "FedNetConfig":
        return cls(m_folds=int(p["m_folds"]), v_ens=int(p["v_ens"]), v_lambda=int(p["v_lambda"]),
                   eta_cap=float(p["eta_cap"]), seed=int(p["seed"]),
                   lambdas=p["lambdas"], arms=tuple(int(a) for a in p["arms"]))


def site_cell_moments(x, a, y, delta, site_id, grid, model, target_summary,
                      config: FedNetConfig):
    """Per-cell augmentation moments computed from local data only.

    This function is the site side of the protocol and also the reference
    the centralized path reproduces: same fold streams, same fits, same
    clipping, same summation order.
    """
    n_k = y.size
    fold_ids = substream(config.seed, "folds", site_id).permutation(n_k) % config.m_folds
    g_mats, pi1, _clip, _tags = site_local_nuisances(
        x, a, y, delta, site_id, fold_ids, grid, config.seed,
        eta_cap=config.eta_cap, v_ens=config.v_ens,
    )
    own_summary = SiteCovariateSummary.from_rows(site_id, x)
    ratio = coarse_ratio_or_fallback(target_summary, own_summary, eta_cap=config.eta_cap)
    omega = np.clip(ratio.ratio_raw(x), 1 / config.eta_cap, config.eta_cap)
    lam_folds = substream(config.seed, "lamcv", site_id).permutation(n_k) % config.v_lambda

    cells = {}
    for arm in config.arms:
        s_mat = np.maximum(model.survival_matrix(x, arm, grid.points), SURVIVAL_FLOOR)
        h = build_h_struct(y, delta, s_mat, g_mats[arm], grid)
        ind_a = (a == arm).astype(float)
        pi_arm = np.clip(pi1 if arm == 1 else 1.0 - pi1, 1e-12, None)
        for t in grid.points:
            jt = int(grid.index_leq(t))
            contrib = s_mat[:, jt] * ind_a / pi_arm * h.h_at(float(t))
            aug = omega * contrib
            cells[(float(t), int(arm))] = SiteMoments.from_rows(
                aug, lam_folds, config.v_lambda, keep_rows=False)
    return cells, own_summary


def moments_to_payload(site_id: int, cells: dict) -> dict:
    out = []
    for (t, arm), sm in sorted(cells.items()):
        out.append({
            "t": float(t), "a": int(arm), "n": int(sm.n),
            "sum_aug": float(sm.sum_aug), "sum_sq_aug": float(sm.sum_sq),
            "fold_n": [int(v) for v in sm.fold_n],
            "fold_sum": [float(v) for v in sm.fold_sum],
            "fold_sumsq": [float(v) for v in sm.fold_sumsq],
        })
    return {"site": site_id, "cells": out}


def payload_to_moments(payload: dict) -> dict:
    cells = {}
    for cell in payload["cells"]:
        extra = set(cell) - MOMENT_CELL_FIELDS
        if extra:
            raise ProtocolError(f"unexpected moment fields {sorted(extra)}")
        cells[(float(cell["t"]), int(cell["a"]))] = SiteMoments(
            n=int(cell["n"]), sum_aug=float(cell["sum_aug"]), sum_sq=float(cell["sum_sq_aug"]),
            fold_n=np.asarray(cell["fold_n"], dtype=np.int64),
            fold_sum=np.asarray(cell["fold_sum"], dtype=float),
            fold_sumsq=np.asarray(cell["fold_sumsq"], dtype=float),
            aug_rows=None,
        )
    return cells


def site_run(local_data: Dataset, transport, config: FedNetConfig = None):
    """Source-site protocol loop: hello, await broadcast, reply with the
    covariate summary and augmentation moments."""
    site_id = int(local_data.r[0])
    if np.any(local_data.r != site_id):
        raise ProtocolError("site data must carry a single site id")
    transport.send(Message("hello", site_id, {"n": int(local_data.n), "d": int(local_data.d)}))
    try:
        msg = transport.recv(timeout=None if config is None else config.timeout)
        if msg.kind == "error":
            return
        if msg.kind != "model_broadcast":
            raise ProtocolError(f"expected model_broadcast, got {msg.kind}")
        cfg = FedNetConfig.from_payload(msg.payload["config"])
        grid = TimeGrid(np.asarray(msg.payload["grid"], dtype=float))
        model = deserialize_survival_model(msg.payload["model"])
        target_summary = SiteCovariateSummary.from_json(msg.payload["target_summary"])
        try:
            cells, own_summary = site_cell_moments(
                local_data.x, local_data.a, local_data.y, local_data.delta,
                site_id, grid, model, target_summary, cfg,
            )
        except Exception as exc:
            transport.send(Message("error", site_id, {"message": repr(exc)}))
            return
        transport.send(Message("covariate_summary", site_id, own_summary.to_json()))
        transport.send(Message("augmentation_moments", site_id, moments_to_payload(site_id, cells)))
        final = transport.recv(timeout=None if config is None else config.timeout)
        if final.kind not in ("ack", "error"):
            raise ProtocolError(f"expected ack, got {final.kind}")
    finally:
        transport.close()


@dataclass
class CoordinatorResult:
    curves: dict                  # arm -> FedCurveEstimate
    transcript: list = field(default_factory=list)
    dropped_sites: list = field(default_factory=list)
    site_summaries: dict = field(default_factory=dict)

    @property
    def degraded(self) -> bool:
        return bool(self.dropped_sites)


def coordinator_run(target_data: Dataset, transports, grid: TimeGrid,
                    config: FedNetConfig) -> CoordinatorResult:
    """Coordinator protocol: broadcast the target outcome model, collect
    per-site moments, and aggregate exactly as the centralized pipeline.

    A site that times out or reports an error is dropped; the weights are
    then solved over the remaining sites and the event is recorded.
    """
    if np.any(target_data.r != 0):
        raise ProtocolError("coordinator data must be target-site rows (r=0)")
    transcript = []

    def log(direction, msg: Message):
        transcript.append({"dir": direction, "site": msg.site, "kind": msg.kind,
                           "payload": msg.payload})

    folds = make_folds(target_data, config.m_folds, config.seed)
    bundle = build_nuisance_bundle(
        target_data, folds, grid, mode=FEDERATED, sharing=COARSE_SHARING,
        seed=config.seed, eta_cap=config.eta_cap, v_ens=config.v_ens,
    )
    engine = EifEngine(bundle, target_data)
    target_summary = SiteCovariateSummary.from_rows(0, target_data.x)
    model_payload = serialize_survival_model(bundle.s_full_model)
    broadcast = Message("model_broadcast", 0, {
        "model": model_payload,
        "target_summary": target_summary.to_json(),
        "grid": grid.points.tolist(),
        "arms": list(config.arms),
        "config": config.to_payload(),
    })

    live = {}
    dropped = []
    for tr in transports:
        try:
            hello = tr.recv(timeout=config.timeout)
            if hello.kind != "hello":
                raise ProtocolError(f"expected hello, got {hello.kind}")
            log("recv", hello)
            live[hello.site] = tr
        except (SiteUnavailable, ProtocolError) as exc:
            dropped.append(("<unknown>", repr(exc)))
            tr.close()
    for site, tr in sorted(live.items()):
        tr.send(broadcast)
        log("send", Message("model_broadcast", site, broadcast.payload))

    summaries = {}
    all_moments = {}
    for site in sorted(live):
        tr = live[site]
        try:
            got_summary, got_moments = None, None
            while got_summary is None or got_moments is None:
                msg = tr.recv(timeout=config.timeout)
                log("recv", msg)
                if msg.kind == "error":
                    raise SiteUnavailable(f"site {site} reported: {msg.payload.get('message')}")
                elif msg.kind == "covariate_summary":
                    got_summary = SiteCovariateSummary.from_json(msg.payload)
                elif msg.kind == "augmentation_moments":
                    got_moments = payload_to_moments(msg.payload)
                else:
                    raise ProtocolError(f"unexpected {msg.kind} from site {site}")
            summaries[site] = got_summary
            all_moments[site] = got_moments
            ack = Message("ack", site, {})
            tr.send(ack)
            log("send", ack)
        except (SiteUnavailable, ProtocolError) as exc:
            dropped.append((site, repr(exc)))
            try:
                tr.send(Message("error", site, {"message": "dropped"}))
            except Exception:
                pass
            tr.close()

    live_sites = tuple(sorted(all_moments))
    fed_config = FedCurveConfig(lambdas=config.lambdas, v_lambda=config.v_lambda,
                                bootstrap=False, seed=config.seed)
    n0 = target_data.n
    tgt_lam_folds = substream(config.seed, "lamcv", 0).permutation(n0) % config.v_lambda

    curves = {}
    for arm in config.arms:
        def stats_at(t, _arm=arm):
            comp = engine.cell_components(t, _arm)
            sites = {k: all_moments[k][(float(t), int(_arm))] for k in live_sites}
            return CellStats(t=float(t), a=int(_arm), anchor=comp.anchor, xi01=comp.xi01,
                             tgt_folds=tgt_lam_folds, sites=sites, v_folds=config.v_lambda)

        curves[arm] = fed_curve_from_stats(stats_at, grid.points, arm, live_sites, fed_config)

    for tr in live.values():
        tr.close()
    return CoordinatorResult(curves=curves, transcript=transcript,
                             dropped_sites=dropped, site_summaries=summaries)


def centralized_fed_curves(dataset: Dataset, grid: TimeGrid, config: FedNetConfig,
                           bootstrap=False, boot_b=200) -> dict:
    """The pooled-data computation the distributed protocol must reproduce."""
    folds = make_folds(dataset, config.m_folds, config.seed)
    bundle = build_nuisance_bundle(
        dataset, folds, grid, mode=FEDERATED, sharing=COARSE_SHARING,
        seed=config.seed, eta_cap=config.eta_cap, v_ens=config.v_ens,
    )
    engine = EifEngine(bundle, dataset)
    fed_config = FedCurveConfig(lambdas=config.lambdas, v_lambda=config.v_lambda,
                                bootstrap=bootstrap, boot_b=boot_b, seed=config.seed)
    n0 = dataset.site_size(0)
    tgt_lam_folds = substream(config.seed, "lamcv", 0).permutation(n0) % config.v_lambda
    curves = {}
    for arm in config.arms:
        def stats_at(t, _arm=arm):
            comp = engine.cell_components(t, _arm)
            sites = {}
            for k in engine.source_sites:
                n_k = comp.aug[k].size
                lam_folds = substream(config.seed, "lamcv", k).permutation(n_k) % config.v_lambda
                sites[k] = SiteMoments.from_rows(comp.aug[k], lam_folds, config.v_lambda, keep_rows=True)
            return CellStats(t=float(t), a=int(_arm), anchor=comp.anchor, xi01=comp.xi01,
                             tgt_folds=tgt_lam_folds, sites=sites, v_folds=config.v_lambda)

        curves[arm] = fed_curve_from_stats(stats_at, grid.points, arm, engine.source_sites, fed_config)
    return curves


def audit_privacy(transcript, d: int, v_folds: int):
    """Schema-level scan: no message from a source site may carry a field of
    per-observation data. Returns a list of violations (empty when clean)."""
    violations = []
    allowed_lengths = {d, v_folds}
    for entry in transcript:
        if entry["dir"] != "recv":
            continue
        kind, payload = entry["kind"], entry["payload"]
        extra = set(payload) - PAYLOAD_FIELDS[kind]
        if extra:
            violations.append((kind, f"unexpected fields {sorted(extra)}"))
        if kind == "covariate_summary":
            if len(payload["mean"]) != d:
                violations.append((kind, "mean has unexpected length"))
            if len(payload["cov"]) != d or any(len(row) != d for row in payload["cov"]):
                violations.append((kind, "cov has unexpected shape"))
        if kind == "augmentation_moments":
            for cell in payload["cells"]:
                extra = set(cell) - MOMENT_CELL_FIELDS
                if extra:
                    violations.append((kind, f"unexpected cell fields {sorted(extra)}"))
                for key in ("fold_n", "fold_sum", "fold_sumsq"):
                    if len(cell[key]) not in allowed_lengths:
                        violations.append((kind, f"{key} has per-observation resolution"))
                for key, value in cell.items():
                    if isinstance(value, list) and key not in ("fold_n", "fold_sum", "fold_sumsq"):
                        violations.append((kind, f"unexpected list field {key}"))
    return violations
