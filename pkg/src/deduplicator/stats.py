"""Per-server and per-range load bookkeeping on the balancer side.

Load arrives three ways: the balancer's own routing decisions
(:meth:`StatsCollector.record_routed`), explicit reports pushed by edge
servers, and resource figures piggybacked on task responses.
"""

from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from deduplicator.errors import InputError, RegistrationRequired
from deduplicator.slices import LoadSample, ServerId, SliceTable

log = logging.getLogger(__name__)

HEADER_CPU = "X-CPU-Load"
HEADER_MEM = "X-Mem-Load"
HEADER_GROUPS = "X-Group-Stats"
PIGGYBACK_HEADERS = (HEADER_CPU, HEADER_MEM, HEADER_GROUPS)

DEFAULT_GROUPS = 64
DEFAULT_ALPHA = 0.5


class Ewma:
    """Exponentially weighted mean; the first observation seeds it."""

    __slots__ = ("alpha", "value", "initialized")

    def __init__(self, alpha: float = DEFAULT_ALPHA):
        self.alpha = alpha
        self.value = 0.0
        self.initialized = False

    def update(self, x: float) -> float:
        if self.initialized:
            self.value += self.alpha * (x - self.value)
        else:
            self.value = x
            self.initialized = True
        return self.value


@dataclass
class RangeGroupStats:
    group_id: int
    tasks: int = 0
    reported_tasks: int = 0
    cpu: Ewma = field(default_factory=Ewma)
    mem: Ewma = field(default_factory=Ewma)


@dataclass
class ServerHealth:
    server: ServerId
    last_response_at: float
    last_notification_at: float
    inflight: int = 0
    inflight_since: float = 0.0
    stalled: bool = False
    cpu: Ewma = field(default_factory=Ewma)
    mem: Ewma = field(default_factory=Ewma)


@dataclass(frozen=True)
class StatsReport:
    server: ServerId
    cpu: float
    mem: float
    per_group: tuple[tuple[int, int, float, float], ...] = ()

    def to_json(self) -> dict:
        return {
            "server": self.server,
            "cpu": self.cpu,
            "mem": self.mem,
            "per_group": [list(g) for g in self.per_group],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "StatsReport":
        try:
            report = cls(
                server=str(doc["server"]),
                cpu=float(doc["cpu"]),
                mem=float(doc["mem"]),
                per_group=tuple(
                    (int(g[0]), int(g[1]), float(g[2]), float(g[3])) for g in doc.get("per_group", ())
                ),
            )
        except (KeyError, TypeError, ValueError, IndexError) as exc:
            raise InputError(f"malformed stats report: {exc}") from None
        report.check()
        return report

    def check(self) -> None:
        for v in (self.cpu, self.mem):
            if not (math.isfinite(v) and 0.0 <= v <= 1.0):
                raise InputError(f"utilisation {v} outside [0, 1]")
        for gid, tasks, cpu, mem in self.per_group:
            if gid < 0 or tasks < 0 or not (0.0 <= cpu <= 1.0 and 0.0 <= mem <= 1.0):
                raise InputError(f"bad group entry {(gid, tasks, cpu, mem)}")


@dataclass(frozen=True)
class OverloadReport:
    server: ServerId
    cpu: float
    mem: float
    hot_groups: tuple[int, ...]
    interior: bool  # hottest group sits away from both edges of the server's slice


def encode_piggyback(cpu: float, mem: float, groups: Mapping[int, int] | None = None) -> dict[str, str]:
    headers = {HEADER_CPU: f"{cpu:.4f}", HEADER_MEM: f"{mem:.4f}"}
    if groups:
        headers[HEADER_GROUPS] = ",".join(f"{g}:{n}" for g, n in sorted(groups.items()))
    return headers


def parse_piggyback(headers: Mapping[str, str]) -> tuple[float | None, float | None, dict[int, int]]:
    """Decode the piggyback headers; raises :class:`InputError` on any malformed field."""
    cpu = mem = None
    groups: dict[int, int] = {}
    raw_cpu = headers.get(HEADER_CPU)
    raw_mem = headers.get(HEADER_MEM)
    raw_groups = headers.get(HEADER_GROUPS)
    try:
        if raw_cpu is not None:
            cpu = float(raw_cpu)
        if raw_mem is not None:
            mem = float(raw_mem)
        if raw_groups:
            for item in raw_groups.split(","):
                gid, _, n = item.partition(":")
                groups[int(gid)] = int(n)
    except ValueError:
        raise InputError("malformed piggyback header") from None
    for v in (cpu, mem):
        if v is not None and not (math.isfinite(v) and 0.0 <= v <= 1.0):
            raise InputError(f"utilisation {v} outside [0, 1]")
    if any(g < 0 or n < 0 for g, n in groups.items()):
        raise InputError("negative group entry")
    return cpu, mem, groups


def group_of(bucket: int, bits: int, groups: int) -> int:
    return (bucket * groups) >> bits


class StatsCollector:
    def __init__(self, bits: int, group_count: int = DEFAULT_GROUPS, alpha: float = DEFAULT_ALPHA):
        if group_count < 1:
            raise InputError("group_count must be positive")
        self.bits = bits
        self.group_count = group_count
        self.alpha = alpha
        self.health: dict[ServerId, ServerHealth] = {}
        self.groups: dict[ServerId, dict[int, RangeGroupStats]] = {}
        self.malformed = 0
        self.last_window: list[LoadSample] = []
        self._window: dict[ServerId, int] = {}
        self._window_groups: dict[ServerId, dict[int, int]] = {}
        self._lock = threading.Lock()

    # registration

    def register(self, server: ServerId, now: float) -> None:
        with self._lock:
            self.health[server] = ServerHealth(server, now, now, cpu=Ewma(self.alpha), mem=Ewma(self.alpha))
            self.groups[server] = {}
            self._window.setdefault(server, 0)
            self._window_groups.setdefault(server, {})

    def unregister(self, server: ServerId) -> None:
        with self._lock:
            self.health.pop(server, None)
            self.groups.pop(server, None)
            self._window.pop(server, None)
            self._window_groups.pop(server, None)

    def _group_stats(self, server: ServerId, gid: int) -> RangeGroupStats:
        table = self.groups[server]
        stats = table.get(gid)
        if stats is None:
            stats = table[gid] = RangeGroupStats(gid, cpu=Ewma(self.alpha), mem=Ewma(self.alpha))
        return stats

    # inputs

    def ingest_notification(self, report: StatsReport, now: float) -> None:
        with self._lock:
            health = self.health.get(report.server)
            if health is None:
                raise RegistrationRequired(report.server)
            health.cpu.update(report.cpu)
            health.mem.update(report.mem)
            health.last_notification_at = now
            for gid, tasks, cpu, mem in report.per_group:
                if gid >= self.group_count:
                    continue
                g = self._group_stats(report.server, gid)
                g.reported_tasks = tasks
                g.cpu.update(cpu)
                g.mem.update(mem)

    def ingest_piggyback(self, server: ServerId, headers: Mapping[str, str], now: float) -> None:
        with self._lock:
            health = self.health.get(server)
            if health is None:
                return
            health.last_response_at = now
            health.stalled = False
            try:
                cpu, mem, groups = parse_piggyback(headers)
            except InputError:
                self.malformed += 1
                return
            if cpu is not None:
                health.cpu.update(cpu)
            if mem is not None:
                health.mem.update(mem)
            for gid, tasks in groups.items():
                if gid < self.group_count:
                    self._group_stats(server, gid).reported_tasks = tasks

    def record_routed(self, server: ServerId, bucket: int) -> None:
        if not 0 <= bucket < (1 << self.bits):
            raise InputError(f"bucket {bucket} outside the space")
        gid = (bucket * self.group_count) >> self.bits
        with self._lock:
            self._window[server] = self._window.get(server, 0) + 1
            counts = self._window_groups.setdefault(server, {})
            counts[gid] = counts.get(gid, 0) + 1

    def begin_request(self, server: ServerId, now: float) -> None:
        with self._lock:
            health = self.health.get(server)
            if health is not None:
                if health.inflight == 0:
                    health.inflight_since = now
                health.inflight += 1

    def end_request(self, server: ServerId, now: float, timed_out: bool = False) -> None:
        with self._lock:
            health = self.health.get(server)
            if health is None:
                return
            health.inflight = max(0, health.inflight - 1)
            if timed_out:
                health.stalled = True
            else:
                health.last_response_at = now

    def inflight(self, server: ServerId) -> int:
        health = self.health.get(server)
        return health.inflight if health else 0

    # outputs

    def current_window(self) -> dict[ServerId, int]:
        with self._lock:
            return dict(self._window)

    def _samples(self, window: dict, groups: dict) -> list[LoadSample]:
        samples = []
        for server in self.health:
            per_range = {}
            known = self.groups.get(server, {})
            for gid, n in groups.get(server, {}).items():
                g = known.get(gid)
                per_range[gid] = (n, g.cpu.value if g else 0.0, g.mem.value if g else 0.0)
            samples.append(LoadSample(server, window.get(server, 0), per_range, self.group_count))
        return samples

    def peek_window(self) -> list[LoadSample]:
        """Samples for the window still in progress, without closing it."""
        with self._lock:
            return self._samples(self._window, self._window_groups)

    def snapshot_window(self) -> list[LoadSample]:
        """Close the current window and return one sample per registered server."""
        with self._lock:
            window, groups = self._window, self._window_groups
            self._window = {s: 0 for s in self.health}
            self._window_groups = {s: {} for s in self.health}
            samples = self._samples(window, groups)
            self.last_window = samples
            return samples

    def detect_failures(
        self,
        now: float,
        response_timeout: float = 2.0,
        notification_timeout: float = 1.0,
        k_missed: int = 3,
    ) -> list[ServerId]:
        """Servers that look dead.

        Anything that answered within ``response_timeout`` or reported within
        one ``notification_timeout`` is considered alive. Otherwise a server
        is dead if a request has waited past ``response_timeout``, a request
        timed out, or no report arrived for ``k_missed`` intervals.
        """
        failed = []
        with self._lock:
            for server, h in self.health.items():
                if now - h.last_response_at <= response_timeout:
                    continue
                if now - h.last_notification_at <= notification_timeout:
                    continue
                waiting = h.inflight > 0 and now - h.inflight_since > response_timeout
                silent = now - h.last_notification_at > k_missed * notification_timeout
                if waiting or h.stalled or silent:
                    failed.append(server)
        return failed

    def detect_overload(
        self,
        table: SliceTable | None,
        cpu_threshold: float = 0.9,
        mem_threshold: float = 0.9,
        top: int = 3,
    ) -> list[OverloadReport]:
        if not (0.0 < cpu_threshold <= 1.0 and 0.0 < mem_threshold <= 1.0):
            raise InputError("thresholds must lie in (0, 1]")
        reports = []
        with self._lock:
            recent = {s.server: s for s in self.last_window}
            for server, h in self.health.items():
                if h.cpu.value <= cpu_threshold and h.mem.value <= mem_threshold:
                    continue
                load = self._group_load(server, recent.get(server))
                hot = tuple(sorted(load, key=lambda g: (-load[g], g))[:top])
                interior = bool(hot) and table is not None and self._is_interior(table, server, hot[0])
                reports.append(OverloadReport(server, h.cpu.value, h.mem.value, hot, interior))
        return reports

    def _group_load(self, server: ServerId, sample: LoadSample | None) -> dict[int, float]:
        load: dict[int, float] = {}
        if sample is not None:
            for gid, (tasks, _cpu, _mem) in sample.per_range.items():
                load[gid] = float(tasks)
        for gid, g in self.groups.get(server, {}).items():
            if gid not in load and g.reported_tasks:
                load[gid] = float(g.reported_tasks)
        return {g: v for g, v in load.items() if v > 0}

    def _is_interior(self, table: SliceTable, server: ServerId, gid: int) -> bool:
        width = table.space // self.group_count or 1
        g_lo = gid * table.space // self.group_count
        g_hi = g_lo + width - 1
        for i in table.slices_of(server):
            s = table.slices[i]
            if s.lo <= g_hi and g_lo <= s.hi:
                return g_lo > s.lo and g_hi < s.hi
        return False

    def group_range(self, gid: int) -> tuple[int, int]:
        space = 1 << self.bits
        lo = gid * space // self.group_count
        hi = (gid + 1) * space // self.group_count - 1
        return lo, hi

    def servers(self) -> Iterable[ServerId]:
        return list(self.health)
