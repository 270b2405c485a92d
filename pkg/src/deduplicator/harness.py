"""In-process experiment driver.

A deployment here is one :class:`~deduplicator.proxy.Deduplicator` plus ``n``
:class:`~deduplicator.edge.EdgeServer` objects joined by direct-call
backends, all sharing a virtual clock. Tasks arrive at ``rate`` per virtual
second; edge servers push explicit reports every ``notification_interval``
and the balancer's control path runs right after each round of reports.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from deduplicator.edge import DEFAULT_CAPACITY, DEFAULT_COST_MS, EdgeServer, ServiceDef
from deduplicator.lsh import hash_vector
from deduplicator.errors import InputError
from deduplicator.messages import TaskRequest, encode_payload, request_headers
from deduplicator.proxy import Deduplicator, InProcessBackend, ProxyConfig
from deduplicator.slices import SliceTable
from deduplicator.strategies import Strategy
from deduplicator.workload import Workload, WorkloadConfig, generate_workload

log = logging.getLogger(__name__)

DEFAULT_RATE = 100.0  # tasks per virtual second


class VirtualClock:
    def __init__(self, start: float = 0.0):
        self.now = start

    def __call__(self) -> float:
        return self.now


@dataclass
class DeploymentParams:
    servers: int = 3
    bits: int = 16
    seed: int = 0
    rate: float = DEFAULT_RATE
    redistribution_interval: float = 5.0
    notification_interval: float = 1.0
    group_count: int = 64
    min_slice: int = 1
    capacity: int = DEFAULT_CAPACITY
    cost_ms: float = DEFAULT_COST_MS
    user_assisted: bool = False
    record_timings: bool = True


@dataclass
class Deployment:
    proxy: Deduplicator
    edges: dict[str, EdgeServer]
    backends: dict[str, InProcessBackend]
    clock: VirtualClock
    services: dict[str, ServiceDef]
    params: DeploymentParams

    def add_edge(self, server_id: str) -> EdgeServer:
        edge = EdgeServer(
            server_id,
            list(self.services.values()),
            bits=self.params.bits,
            capacity=self.params.capacity,
            group_count=self.params.group_count,
            clock=self.clock,
        )
        self.edges[server_id] = edge
        self.backends[server_id] = InProcessBackend(edge)
        return edge

    def report_round(self) -> None:
        for sid in list(self.proxy.backends):
            report = self.backends[sid].report(self.clock.now)
            if report is not None:
                self.proxy.ingest_notification(report)


def server_name(i: int) -> str:
    return f"S{i + 1}"


def services_for(workload: Workload, cost_ms: float = DEFAULT_COST_MS) -> dict[str, ServiceDef]:
    # the stand-in classifier names the scene a payload came from
    return {name: ServiceDef(name, workload.centroids, cost_ms) for name in workload.config.services}


def build_deployment(strategy: Strategy, workload: Workload, params: DeploymentParams) -> Deployment:
    clock = VirtualClock()
    proxy = Deduplicator(
        ProxyConfig(
            strategy=strategy,
            bits=params.bits,
            dim=workload.config.dim,
            seed=params.seed,
            group_count=params.group_count,
            min_slice=params.min_slice,
            redistribution_interval=params.redistribution_interval,
            notification_interval=params.notification_interval,
        ),
        clock=clock,
        record_timings=params.record_timings,
    )
    dep = Deployment(proxy, {}, {}, clock, services_for(workload, params.cost_ms), params)
    for i in range(params.servers):
        dep.add_edge(server_name(i))
    proxy.strategy_init(dep.backends.values())
    return dep


@dataclass
class RunLog:
    """Raw per-task outcomes of one replay."""

    strategy: Strategy
    servers: list[str]
    task_index: list[int] = field(default_factory=list)
    server: list[str | None] = field(default_factory=list)
    status: list[int] = field(default_factory=list)
    reused: list[bool] = field(default_factory=list)
    label: list[int] = field(default_factory=list)
    similarity: list[float] = field(default_factory=list)
    epoch: list[int] = field(default_factory=list)
    decision_ns: list[int] = field(default_factory=list)
    redistributions: int = 0
    migrated_entries: int = 0
    events: list = field(default_factory=list)
    valid: bool = True


def replay(
    dep: Deployment,
    workload: Workload,
    threshold: float | None = None,
    hooks: dict[int, Callable[[Deployment], None]] | None = None,
    start: int = 0,
    stop: int | None = None,
    log_: RunLog | None = None,
) -> RunLog:
    """Push tasks ``start:stop`` of ``workload`` through the deployment.

    ``hooks`` maps a task index to a callback run just before that task is sent.
    """
    proxy = dep.proxy
    params = dep.params
    threshold = workload.config.threshold if threshold is None else threshold
    run = log_ or RunLog(proxy.strategy, list(proxy.backends))
    stop = len(workload) if stop is None else stop
    payloads = workload.payloads
    services = workload.config.services
    service_of = workload.service_of
    client_of = workload.client_of
    step = 1.0 / params.rate
    next_report = dep.clock.now + params.notification_interval
    hasher = proxy.hasher
    user_assisted = params.user_assisted
    pad = workload.config.pad_bytes
    bits = proxy.config.bits

    for i in range(start, stop):
        dep.clock.now = i * step
        if dep.clock.now >= next_report:
            dep.report_round()
            proxy.control_tick()
            next_report += params.notification_interval
        if hooks and i in hooks:
            hooks[i](dep)
        payload = payloads[i]
        req = TaskRequest(
            workload.task_ids[i],
            services[service_of[i]],
            threshold,
            payload,
            f"client-{client_of[i]}",
            hash_vector(hasher, payload) if user_assisted else None,
        )
        epoch = proxy.table.epoch
        if pad:
            # go through the wire encoding so parsing the padded body is part of the decision
            body = encode_payload(payload, pad)
            resp = proxy.handle_raw(req.service, request_headers(req, bits), body)
        else:
            resp = proxy.handle_task(req)
        run.task_index.append(i)
        run.server.append(resp.server)
        run.status.append(resp.status)
        run.reused.append(resp.reused)
        run.label.append(resp.result.label if resp.result is not None else -1)
        run.similarity.append(resp.similarity if resp.similarity is not None else math.nan)
        run.epoch.append(epoch)
    run.decision_ns = list(proxy.decision_ns)
    run.redistributions = proxy.redistributions
    run.migrated_entries = proxy.migrated_entries
    run.events = list(proxy.events)
    return run


def reuse_accuracy_oracle(
    run: RunLog, workload: Workload, services: dict[str, ServiceDef]
) -> float | None:
    """Percent of reused responses whose label matches a fresh execution; None if nothing was reused."""
    reused = 0
    correct = 0
    for idx, was_reused, label in zip(run.task_index, run.reused, run.label):
        if not was_reused:
            continue
        reused += 1
        svc = services[workload.service(idx)]
        if svc.classify(workload.payloads[idx]) == label:
            correct += 1
    if reused == 0:
        return None
    return 100.0 * correct / reused


@dataclass
class ExperimentReport:
    strategy: str
    servers: int
    percent_reuse: float
    per_server_share: list[float]
    reuse_accuracy: float | None
    overhead_p50_ms: float
    overhead_p99_ms: float
    epochs: float
    migrated_entries: float
    reps: int = 1
    valid: bool = True
    errors: int = 0


def summarize(run: RunLog, workload: Workload, services: dict[str, ServiceDef]) -> ExperimentReport:
    total = len(run.task_index)
    counts = {s: 0 for s in run.servers}
    for s in run.server:
        if s is not None:
            counts[s] = counts.get(s, 0) + 1
    routed = sum(counts.values())
    shares = [100.0 * counts[s] / routed if routed else 0.0 for s in counts]
    ok = [st == 200 for st in run.status]
    reused = sum(1 for r, good in zip(run.reused, ok) if r and good)
    ns = np.asarray(run.decision_ns, dtype=np.float64)
    return ExperimentReport(
        strategy=run.strategy.value,
        servers=len(run.servers),
        percent_reuse=100.0 * reused / total if total else 0.0,
        per_server_share=shares,
        reuse_accuracy=reuse_accuracy_oracle(run, workload, services),
        overhead_p50_ms=float(np.percentile(ns, 50)) / 1e6 if ns.size else 0.0,
        overhead_p99_ms=float(np.percentile(ns, 99)) / 1e6 if ns.size else 0.0,
        epochs=float(run.redistributions),
        migrated_entries=float(run.migrated_entries),
        valid=run.valid,
        errors=total - sum(ok),
    )


def average(reports: Sequence[ExperimentReport]) -> ExperimentReport:
    if not reports:
        raise ValueError("nothing to average")
    n = len(reports)
    width = max(len(r.per_server_share) for r in reports)
    shares = [
        sum(r.per_server_share[i] if i < len(r.per_server_share) else 0.0 for r in reports) / n
        for i in range(width)
    ]
    accs = [r.reuse_accuracy for r in reports if r.reuse_accuracy is not None]
    return ExperimentReport(
        strategy=reports[0].strategy,
        servers=reports[0].servers,
        percent_reuse=sum(r.percent_reuse for r in reports) / n,
        per_server_share=shares,
        reuse_accuracy=sum(accs) / len(accs) if accs else None,
        overhead_p50_ms=sum(r.overhead_p50_ms for r in reports) / n,
        overhead_p99_ms=sum(r.overhead_p99_ms for r in reports) / n,
        epochs=sum(r.epochs for r in reports) / n,
        migrated_entries=sum(r.migrated_entries for r in reports) / n,
        reps=n,
        valid=all(r.valid for r in reports),
        errors=sum(r.errors for r in reports),
    )


def run_experiment(
    strategy: Strategy | str,
    params: DeploymentParams,
    cfg: WorkloadConfig,
    reps: int = 10,
) -> ExperimentReport:
    """Replay ``reps`` independently seeded workloads and average the metrics."""
    strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
    reports = []
    for rep in range(reps):
        rep_cfg = replace(cfg, seed=cfg.seed + rep)
        rep_params = replace(params, seed=params.seed + rep)
        workload = generate_workload(rep_cfg)
        dep = build_deployment(strategy, workload, rep_params)
        try:
            run = replay(dep, workload)
        except Exception:
            log.exception("deployment failed during rep %d", rep)
            run = RunLog(strategy, list(dep.backends), valid=False)
        reports.append(summarize(run, workload, dep.services))
    return average(reports)


# similarity threshold adaptation


def estimate_accuracy(groups: Sequence[Sequence[tuple[int, int]]]) -> float | None:
    """Percent of (reused label, fresh label) pairs that agree across all groups."""
    pairs = [p for g in groups for p in g]
    if not pairs:
        return None
    return 100.0 * sum(1 for reused, fresh in pairs if reused == fresh) / len(pairs)


def adapt_threshold(
    current: float,
    groups: Sequence[Sequence[tuple[int, int]]],
    target_accuracy: float,
    step: float = 0.01,
    margin: float = 5.0,
) -> float:
    """One adjustment step from sampled groups of (reused label, fresh label) pairs.

    Raise the threshold when the sampled accuracy is below target, lower it when
    it clears the target by more than ``margin`` points. An empty sample leaves
    the threshold where it is.
    """
    acc = estimate_accuracy(groups)
    if acc is None:
        return current
    if acc < target_accuracy:
        current += step
    elif acc > target_accuracy + margin:
        current -= step
    return min(1.0, max(0.0, round(current, 10)))


@dataclass
class ReuseCandidates:
    """Nearest stored entry for each probe task, against a cache filled from a warm-up prefix."""

    similarity: np.ndarray
    reused_label: np.ndarray
    fresh_label: np.ndarray

    def pairs_at(self, threshold: float) -> np.ndarray:
        """Indices of probes that would be reused at ``threshold``."""
        return np.nonzero(self.similarity >= threshold)[0]


def reuse_candidates(workload: Workload, warmup: int, service: ServiceDef | None = None) -> ReuseCandidates:
    service = service or ServiceDef("detect", workload.centroids)
    if not 0 < warmup < len(workload):
        raise InputError("warm-up must leave both cached and probe tasks")
    cached = workload.payloads[:warmup]
    probes = workload.payloads[warmup:]
    labels = np.array([service.classify(v) for v in cached])
    sims = probes @ cached.T  # payloads are unit vectors
    nearest = sims.argmax(axis=1)
    return ReuseCandidates(
        similarity=sims[np.arange(len(probes)), nearest],
        reused_label=labels[nearest],
        fresh_label=np.array([service.classify(v) for v in probes]),
    )


def threshold_trajectory(
    candidates: ReuseCandidates,
    start: float,
    target_accuracy: float,
    rounds: int = 100,
    group_count: int = 5,
    group_size: int = 20,
    step: float = 0.01,
    margin: float = 5.0,
    seed: int = 0,
) -> list[float]:
    """Thresholds visited by repeated sampling and adjustment; element 0 is ``start``."""
    rng = np.random.default_rng(seed)
    threshold = start
    path = [threshold]
    for _ in range(rounds):
        pool = candidates.pairs_at(threshold)
        groups: list[list[tuple[int, int]]] = []
        if pool.size:
            picks = rng.choice(pool, size=(group_count, group_size), replace=pool.size < group_count * group_size)
            groups = [
                [(int(candidates.reused_label[i]), int(candidates.fresh_label[i])) for i in row] for row in picks
            ]
        threshold = adapt_threshold(threshold, groups, target_accuracy, step, margin)
        path.append(threshold)
    return path


# scripted server addition and failure


@dataclass
class ScenarioResult:
    report: ExperimentReport
    run: RunLog
    events: list
    added: str
    failed: str
    added_at: float
    failed_at: float
    detected_at: float | None
    tables_valid: bool
    routed_to_failed_after_detection: int
    added_share_within_interval: int


def failure_and_addition_scenario(
    strategy: Strategy | str = Strategy.REUSE_ADAPTIVE,
    params: DeploymentParams | None = None,
    cfg: WorkloadConfig | None = None,
    add_at: int | None = None,
    fail_at: int | None = None,
    fail_server: str = "S2",
) -> ScenarioResult:
    """Register a 4th server a third of the way in and fail ``fail_server`` at two thirds."""
    strategy = Strategy.parse(strategy) if isinstance(strategy, str) else strategy
    params = params or DeploymentParams(servers=3)
    cfg = cfg or WorkloadConfig()
    workload = generate_workload(cfg)
    n = len(workload)
    add_at = n // 3 if add_at is None else add_at
    fail_at = 2 * n // 3 if fail_at is None else fail_at
    dep = build_deployment(strategy, workload, params)
    added = server_name(params.servers)

    def add(d: Deployment) -> None:
        d.add_edge(added)
        d.proxy.handle_register(d.backends[added])

    def fail(d: Deployment) -> None:
        d.edges[fail_server].set_failed(True)

    run = replay(dep, workload, hooks={add_at: add, fail_at: fail})
    step = 1.0 / params.rate
    tables_valid = True
    detected_at = None
    for ev in dep.proxy.events:
        if ev.kind == "epoch":
            try:
                SliceTable.from_json(ev.detail["table"]).validate()
            except (InputError, ValueError, KeyError):
                tables_valid = False
        elif ev.kind == "failure" and ev.detail.get("server") == fail_server and detected_at is None:
            detected_at = ev.at
    if strategy.reuse_aware:
        try:
            dep.proxy.table.validate()
        except (InputError, ValueError):
            tables_valid = False
    after = [
        srv for i, srv in zip(run.task_index, run.server)
        if detected_at is not None and i * step > detected_at
    ]
    window_end = add_at + int(params.redistribution_interval * params.rate)
    new_share = sum(1 for i, srv in zip(run.task_index, run.server) if add_at <= i < window_end and srv == added)
    run.servers = list(dict.fromkeys(run.servers + [added]))
    return ScenarioResult(
        report=summarize(run, workload, dep.services),
        run=run,
        events=list(dep.proxy.events),
        added=added,
        failed=fail_server,
        added_at=add_at * step,
        failed_at=fail_at * step,
        detected_at=detected_at,
        tables_valid=tables_valid,
        routed_to_failed_after_detection=sum(1 for srv in after if srv == fail_server),
        added_share_within_interval=new_share,
    )


# CSV output

CSV_COLUMNS = ("strategy", "servers", "metric", "value", "server_index")
_SCALAR_METRICS = (
    "percent_reuse",
    "reuse_accuracy",
    "overhead_p50_ms",
    "overhead_p99_ms",
    "epochs",
    "migrated_entries",
)


def csv_rows(reports: Iterable[ExperimentReport]) -> list[list]:
    rows: list[list] = []
    for r in reports:
        for metric in _SCALAR_METRICS:
            value = getattr(r, metric)
            rows.append([r.strategy, r.servers, metric, "NA" if value is None else f"{value:.6g}", ""])
        for i, share in enumerate(r.per_server_share):
            rows.append([r.strategy, r.servers, "per_server_share", f"{share:.6g}", i])
    return rows


def emit_csv(reports: Iterable[ExperimentReport], out) -> int:
    """Write ``strategy,servers,metric,value,server_index`` rows to a path or text stream.

    ``server_index`` is filled only for ``per_server_share`` rows; accuracy is
    ``NA`` when nothing was reused. Returns the number of data rows.
    """
    rows = csv_rows(reports)
    if isinstance(out, (str, bytes)) or hasattr(out, "__fspath__"):
        with open(out, "w", newline="") as fh:
            return emit_csv_rows(rows, fh)
    return emit_csv_rows(rows, out)


def emit_csv_rows(rows: list[list], fh) -> int:
    writer = csv.writer(fh)
    writer.writerow(CSV_COLUMNS)
    writer.writerows(rows)
    return len(rows)
