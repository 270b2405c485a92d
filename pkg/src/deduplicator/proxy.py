"""The balancer core, independent of transport.

:class:`Deduplicator` turns a :class:`TaskRequest` into a routing decision,
forwards it through a :class:`Backend`, and relays the response with the
piggybacked resource headers stripped. A single control path
(:meth:`Deduplicator.control_tick`) handles failure detection and periodic
redistribution of the hash space; request handling only ever reads the
current :class:`SliceTable` snapshot.
"""

from __future__ import annotations

import logging
import threading
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Protocol

from deduplicator.errors import (
    BackendTimeout,
    InputError,
    InvalidAdjustment,
    NoLiveServers,
)
from deduplicator.lsh import LshConfig, build_hasher, hash_vector
from deduplicator.messages import H_TASK_ID, TaskRequest, TaskResponse, header, parse_request
from deduplicator.slices import (
    LoadSample,
    MigrationDirective,
    ServerId,
    SliceTable,
    add_server,
    adaptive_redistribute,
    merge_adjacent,
    ownership_diff,
    remove_server,
    shrink_edges,
    split_fine,
)
from deduplicator.stats import PIGGYBACK_HEADERS, StatsCollector, StatsReport
from deduplicator.strategies import (
    ConsistentHash,
    LeastConnection,
    RandomChoice,
    RoundRobin,
    Strategy,
    static_table,
)

log = logging.getLogger(__name__)

_STRIP = {h.lower() for h in PIGGYBACK_HEADERS}


class Backend(Protocol):
    server_id: ServerId
    address: str

    def submit(self, req: TaskRequest, bucket: int, epoch: int) -> TaskResponse: ...

    def migrate(self, lo: int, hi: int, target: "Backend") -> int: ...


@dataclass(frozen=True)
class RouteDecision:
    server: ServerId
    bucket: int
    epoch: int


@dataclass
class ProxyConfig:
    strategy: Strategy = Strategy.REUSE_ADAPTIVE
    bits: int = 16
    dim: int = 16
    seed: int = 0
    group_count: int = 64
    min_slice: int = 1
    redistribution_interval: float = 5.0
    cpu_threshold: float = 0.9
    mem_threshold: float = 0.9
    response_timeout: float = 2.0
    notification_interval: float = 1.0
    k_missed: int = 3
    vnodes: int = 100
    reactive: bool = False
    incremental_resize: bool = True


@dataclass
class Event:
    at: float
    kind: str
    detail: dict = field(default_factory=dict)


class Deduplicator:
    def __init__(
        self,
        config: ProxyConfig | None = None,
        clock: Callable[[], float] = time.monotonic,
        record_timings: bool = False,
    ):
        self.config = config or ProxyConfig()
        self.strategy = Strategy(self.config.strategy)
        self.clock = clock
        self.hasher = build_hasher(LshConfig(self.config.bits, self.config.dim, self.config.seed))
        self.stats = StatsCollector(self.config.bits, self.config.group_count)
        self.backends: dict[ServerId, Backend] = {}
        self.table: SliceTable = SliceTable(self.config.bits, (), ())
        self.router = None
        self.routed: Counter[ServerId] = Counter()
        self.errors: Counter[ServerId] = Counter()
        self.record_timings = record_timings
        self.decision_ns: list[int] = []
        self.events: list[Event] = []
        self.redistributions = 0
        self.migrated_entries = 0
        self.last_redistribution = clock()
        self._control = threading.RLock()
        self.strategy_init([])

    # setup

    @property
    def servers(self) -> list[ServerId]:
        return list(self.backends)

    def strategy_init(self, backends: Iterable[Backend]) -> None:
        """Reset routing state for the given deployment (in registration order)."""
        with self._control:
            now = self.clock()
            for b in backends:
                if b.server_id in self.backends:
                    raise InputError(f"duplicate server {b.server_id}")
                self.backends[b.server_id] = b
                self.stats.register(b.server_id, now)
            servers = self.servers
            cfg = self.config
            if self.strategy.reuse_aware:
                self.table = static_table(self.strategy, servers, cfg.bits)
                self.router = None
            elif self.strategy is Strategy.ROUND_ROBIN:
                self.router = RoundRobin(servers)
            elif self.strategy is Strategy.RANDOM:
                self.router = RandomChoice(servers, cfg.seed)
            elif self.strategy is Strategy.LEAST_CONNECTION:
                self.router = LeastConnection(servers, self.stats.inflight)
            else:
                self.router = ConsistentHash(servers, cfg.vnodes)
            self.last_redistribution = now

    # data path

    def route(self, req: TaskRequest, started_ns: int | None = None) -> RouteDecision:
        t0 = time.perf_counter_ns() if started_ns is None else started_ns
        if req.precomputed_signature is not None:
            bucket = req.precomputed_signature
            if not 0 <= bucket < (1 << self.config.bits):
                raise InputError(f"signature {bucket} outside the {self.config.bits}-bit space")
        elif self.strategy.reuse_aware:
            bucket = hash_vector(self.hasher, req.payload)
        else:
            bucket = -1
        if self.strategy.reuse_aware:
            table = self.table
            if not table.slices:
                raise NoLiveServers("no live servers")
            server = table.lookup(bucket)
            epoch = table.epoch
        else:
            server = self.router.select(req.client_id)
            epoch = self.table.epoch
        if self.record_timings:
            self.decision_ns.append(time.perf_counter_ns() - t0)
        if bucket < 0:
            # baselines do not route on the hash, but servers still file entries under it
            bucket = hash_vector(self.hasher, req.payload)
        self.stats.record_routed(server, bucket)
        self.routed[server] += 1
        return RouteDecision(server, bucket, epoch)

    def forward_and_relay(self, req: TaskRequest, decision: RouteDecision) -> TaskResponse:
        backend = self.backends.get(decision.server)
        if backend is None:
            return TaskResponse(req.task_id, None, status=503, error="server left the deployment")
        now = self.clock()
        self.stats.begin_request(decision.server, now)
        try:
            resp = backend.submit(req, decision.bucket, decision.epoch)
        except (BackendTimeout, ConnectionError, TimeoutError, OSError) as exc:
            self.stats.end_request(decision.server, self.clock(), timed_out=True)
            self.errors[decision.server] += 1
            return TaskResponse(req.task_id, None, status=504, error=str(exc), server=decision.server)
        now = self.clock()
        self.stats.end_request(decision.server, now)
        self.stats.ingest_piggyback(decision.server, resp.headers, now)
        resp.headers = {k: v for k, v in resp.headers.items() if k.lower() not in _STRIP}
        resp.server = decision.server
        return resp

    def handle_task(self, req: TaskRequest) -> TaskResponse:
        try:
            decision = self.route(req)
        except NoLiveServers as exc:
            return TaskResponse(req.task_id, None, status=503, error=str(exc))
        except InputError as exc:
            return TaskResponse(req.task_id, None, status=400, error=str(exc))
        return self.forward_and_relay(req, decision)

    def handle_raw(self, service: str, headers: Mapping[str, str], body: bytes) -> TaskResponse:
        """Parse a wire request and serve it; body parsing counts toward the decision time."""
        t0 = time.perf_counter_ns()
        try:
            req = parse_request(service, headers, body, self.config.dim, self.config.bits)
        except InputError as exc:
            return TaskResponse(header(headers, H_TASK_ID, "") or "", None, status=400, error=str(exc))
        try:
            decision = self.route(req, t0)
        except NoLiveServers as exc:
            return TaskResponse(req.task_id, None, status=503, error=str(exc))
        except InputError as exc:
            return TaskResponse(req.task_id, None, status=400, error=str(exc))
        return self.forward_and_relay(req, decision)

    # control path

    def _log(self, kind: str, **detail) -> None:
        self.events.append(Event(self.clock(), kind, detail))

    def _swap(self, table: SliceTable, moves: list[MigrationDirective], reason: str) -> None:
        self.table = table
        self._log("epoch", epoch=table.epoch, reason=reason, table=table.to_json())
        self.apply_migrations(moves)

    def apply_migrations(self, moves: Iterable[MigrationDirective]) -> int:
        """Ask each source server to ship the cached entries of a moved range to its new owner."""
        total = 0
        for m in moves:
            src = self.backends.get(m.source)
            dst = self.backends.get(m.target)
            if src is None or dst is None:
                continue
            try:
                moved = src.migrate(m.lo, m.hi, dst)
            except (BackendTimeout, ConnectionError, TimeoutError, OSError) as exc:
                log.warning("migration %s failed: %s", m, exc)
                self._log("migration-failed", directive=m.to_dict(), error=str(exc))
                continue
            total += moved
            self._log("migration", directive=m.to_dict(), moved=moved)
        self.migrated_entries += total
        return total

    def _load_samples(self) -> list[LoadSample]:
        current = self.stats.peek_window()
        if any(s.tasks for s in current):
            return current
        return self.stats.last_window or current

    def ingest_notification(self, report: StatsReport) -> None:
        self.stats.ingest_notification(report, self.clock())

    def handle_register(self, backend: Backend) -> None:
        with self._control:
            server = backend.server_id
            if server in self.backends:
                raise InputError(f"{server} is already registered")
            samples = self._load_samples()
            self.backends[server] = backend
            self.stats.register(server, self.clock())
            self._log("register", server=server)
            if self.strategy is Strategy.REUSE_ADAPTIVE:
                new, moves = add_server(self.table, samples, server, self.config.min_slice)
                self._swap(new, moves, "register")
            elif self.strategy.reuse_aware:
                rebuilt = static_table(self.strategy, self.servers, self.config.bits)
                new = SliceTable(rebuilt.bits, rebuilt.slices, rebuilt.servers, self.table.epoch + 1)
                self._swap(new, ownership_diff(self.table, new), "register")
            else:
                self.router.add(server)

    def handle_failure(self, server: ServerId) -> None:
        with self._control:
            if server not in self.backends:
                return
            if len(self.backends) == 1:
                log.error("last server %s looks dead; keeping it", server)
                return
            if self.strategy.reuse_aware:
                self.table = remove_server(self.table, server, self._load_samples())
                self._log("epoch", epoch=self.table.epoch, reason="failure", table=self.table.to_json())
            else:
                self.router.remove(server)
            del self.backends[server]
            self.stats.unregister(server)
            self._log("failure", server=server)

    def redistribution_tick(self) -> bool:
        """Close the load window and resize slices from it. Returns True if a new epoch started."""
        if self.strategy is not Strategy.REUSE_ADAPTIVE:
            return False
        with self._control:
            self.last_redistribution = self.clock()
            samples = self.stats.snapshot_window()
            try:
                new, moves = adaptive_redistribute(
                    self.table, samples, self.config.min_slice, self.config.incremental_resize
                )
            except (InputError, InvalidAdjustment, ValueError) as exc:
                log.warning("redistribution skipped: %s", exc)
                return False
            if new is self.table:
                return False
            self.redistributions += 1
            self._swap(new, moves, "redistribution")
            tidy = merge_adjacent(self.table)
            if tidy is not self.table:
                self.table = tidy
            return True

    def rebalance_overloaded(self) -> list[MigrationDirective]:
        """Edge-shrink or fine-split the slices of servers over the CPU/memory thresholds."""
        if not self.strategy.reuse_aware:
            return []
        done: list[MigrationDirective] = []
        with self._control:
            reports = self.stats.detect_overload(self.table, self.config.cpu_threshold, self.config.mem_threshold)
            window = {s.server: s.tasks for s in self._load_samples()}
            for rep in reports:
                if not rep.hot_groups or len(self.backends) < 2:
                    continue
                lo, hi = self.stats.group_range(rep.hot_groups[0])
                table = self.table
                idx = table.slice_index(lo)
                host = table.slices[idx]
                if host.server != rep.server:
                    continue
                lo, hi = max(lo, host.lo), min(hi, host.hi)
                try:
                    if rep.interior:
                        others = [s for s in self.servers if s != rep.server]
                        target = min(others, key=lambda s: (window.get(s, 0), others.index(s)))
                        new, moves = split_fine(table, rep.server, (lo, hi), target, self.config.min_slice)
                    elif lo == host.lo and idx > 0:
                        new, moves = shrink_edges(table, rep.server, hi - lo + 1, 0, self.config.min_slice, at=lo)
                    elif idx + 1 < len(table.slices):
                        new, moves = shrink_edges(table, rep.server, 0, hi - lo + 1, self.config.min_slice, at=lo)
                    else:
                        continue
                except InvalidAdjustment as exc:
                    log.info("no reactive adjustment for %s: %s", rep.server, exc)
                    continue
                self._swap(new, moves, "overload")
                done.extend(moves)
        return done

    def control_tick(self) -> None:
        now = self.clock()
        cfg = self.config
        for server in self.stats.detect_failures(
            now, cfg.response_timeout, cfg.notification_interval, cfg.k_missed
        ):
            self.handle_failure(server)
        if cfg.reactive:
            self.rebalance_overloaded()
        if (
            self.strategy is Strategy.REUSE_ADAPTIVE
            and now - self.last_redistribution >= cfg.redistribution_interval
        ):
            self.redistribution_tick()

    def admin_metrics(self) -> dict:
        health = {}
        for server, h in self.stats.health.items():
            health[server] = {
                "cpu": h.cpu.value,
                "mem": h.mem.value,
                "inflight": h.inflight,
                "last_response_at": h.last_response_at,
                "last_notification_at": h.last_notification_at,
            }
        return {
            "strategy": self.strategy.value,
            "epoch": self.table.epoch,
            "table": self.table.to_json() if self.strategy.reuse_aware else None,
            "servers": {s: getattr(b, "address", "") for s, b in self.backends.items()},
            "routed": dict(self.routed),
            "errors": dict(self.errors),
            "health": health,
            "redistributions": self.redistributions,
            "migrated_entries": self.migrated_entries,
            "malformed_piggyback": self.stats.malformed,
        }


class InProcessBackend:
    """Direct-call transport to an :class:`~deduplicator.edge.EdgeServer` in the same process."""

    def __init__(self, edge, address: str | None = None):
        self.edge = edge
        self.server_id = edge.server_id
        self.address = address or f"inproc://{edge.server_id}"

    def submit(self, req: TaskRequest, bucket: int, epoch: int) -> TaskResponse:
        if self.edge.failed:
            raise BackendTimeout(f"{self.server_id} did not answer")
        resp = self.edge.handle_task(req, bucket)
        return resp

    def migrate(self, lo: int, hi: int, target: "InProcessBackend") -> int:
        return self.edge.migrate_entries(lo, hi, target.receive)

    def receive(self, entries) -> int:
        if self.edge.failed:
            raise BackendTimeout(f"{self.server_id} did not answer")
        return self.edge.receive_entries(entries)

    def report(self, now: float | None = None) -> StatsReport | None:
        if self.edge.failed:
            return None
        return self.edge.report_stats(now)


def strip_piggyback(headers: Mapping[str, str]) -> dict[str, str]:
    return {k: v for k, v in headers.items() if k.lower() not in _STRIP}
