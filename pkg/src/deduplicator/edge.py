"""Emulated edge server with a nearest-neighbour reuse cache.

The stand-in service labels a payload with the index of its closest
centroid, so the "right answer" for any payload can be recomputed exactly.
Execution cost is virtual: it only feeds the reported CPU fraction.
"""

from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from deduplicator import kernels
from deduplicator.errors import InputError
from deduplicator.lsh import (
    Hasher,
    as_feature_vector,
    hash_vector,
    signature_from_hex,
    signature_to_hex,
)
from deduplicator.messages import (
    FROM_SCRATCH,
    REUSED,
    ResultValue,
    TaskRequest,
    TaskResponse,
)
from deduplicator.stats import DEFAULT_GROUPS, Ewma, StatsReport, encode_piggyback

DEFAULT_CAPACITY = 10_000
DEFAULT_COST_MS = 10.0


@dataclass(frozen=True)
class ServiceDef:
    name: str
    centroids: np.ndarray
    cost_ms: float = DEFAULT_COST_MS

    def __post_init__(self) -> None:
        c = np.ascontiguousarray(self.centroids, dtype=np.float64)
        if c.ndim != 2 or c.shape[0] < 1:
            raise InputError("a service needs at least one centroid")
        norms = np.linalg.norm(c, axis=1)
        if np.any(norms == 0):
            raise InputError("zero centroid")
        c = np.ascontiguousarray(c / norms[:, None])
        c.setflags(write=False)
        object.__setattr__(self, "centroids", c)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def classify(self, payload: np.ndarray) -> int:
        """Index of the centroid with the highest cosine similarity; lowest index on ties."""
        return int(kernels.argmax_rows(self.centroids, payload))


def random_service(name: str, labels: int, dim: int, seed: int, cost_ms: float = DEFAULT_COST_MS) -> ServiceDef:
    rng = np.random.default_rng(seed)
    return ServiceDef(name, rng.standard_normal((labels, dim)), cost_ms)


@dataclass(frozen=True)
class ReuseCacheEntry:
    service: str
    vector: np.ndarray
    signature: int
    result: ResultValue
    stored_at: float

    def to_json(self, bits: int) -> dict:
        return {
            "service": self.service,
            "vector": [float(x) for x in self.vector],
            "signature_hex": signature_to_hex(self.signature, bits),
            "label": self.result.label,
            "stored_at": self.stored_at,
        }

    @classmethod
    def from_json(cls, doc: Mapping, bits: int) -> "ReuseCacheEntry":
        return cls(
            service=str(doc["service"]),
            vector=as_feature_vector(doc["vector"]),
            signature=signature_from_hex(doc["signature_hex"], bits),
            result=ResultValue(int(doc["label"])),
            stored_at=float(doc.get("stored_at", 0.0)),
        )


class ReuseCache:
    """Entries of one service, kept in store order (later rows are more recent)."""

    def __init__(self, dim: int, capacity: int = DEFAULT_CAPACITY):
        self.dim = dim
        self.capacity = capacity
        self.count = 0
        self.vectors = np.empty((64, dim), dtype=np.float64)
        self.unit = np.empty((64, dim), dtype=np.float64)
        self.signatures = np.empty(64, dtype=np.int64)
        self.labels = np.empty(64, dtype=np.int64)
        self.stored_at = np.empty(64, dtype=np.float64)

    def __len__(self) -> int:
        return self.count

    def _grow(self) -> None:
        size = self.vectors.shape[0] * 2
        for name in ("vectors", "unit", "signatures", "labels", "stored_at"):
            old = getattr(self, name)
            new = np.empty((size,) + old.shape[1:], dtype=old.dtype)
            new[: self.count] = old[: self.count]
            setattr(self, name, new)

    def add(self, vector: np.ndarray, unit: np.ndarray, signature: int, label: int, stored_at: float) -> None:
        if self.count == self.vectors.shape[0]:
            self._grow()
        i = self.count
        self.vectors[i] = vector
        self.unit[i] = unit
        self.signatures[i] = signature
        self.labels[i] = label
        self.stored_at[i] = stored_at
        self.count += 1

    def nearest(self, unit_query: np.ndarray) -> tuple[int, float]:
        return kernels.nearest(self.unit, self.count, unit_query)

    def _keep(self, mask: np.ndarray) -> None:
        n = int(mask.sum())
        for name in ("vectors", "unit", "signatures", "labels", "stored_at"):
            arr = getattr(self, name)
            arr[:n] = arr[: self.count][mask]
        self.count = n

    def evict_oldest(self, k: int) -> int:
        k = min(k, self.count)
        if k > 0:
            mask = np.ones(self.count, dtype=bool)
            mask[:k] = False
            self._keep(mask)
        return k

    def take_range(self, lo: int, hi: int) -> list[tuple[np.ndarray, int, int, float]]:
        sig = self.signatures[: self.count]
        hit = (sig >= lo) & (sig <= hi)
        if not hit.any():
            return []
        idx = np.nonzero(hit)[0]
        out = [
            (self.vectors[i].copy(), int(self.signatures[i]), int(self.labels[i]), float(self.stored_at[i]))
            for i in idx
        ]
        self._keep(~hit)
        return out

    def entries(self) -> Iterable[tuple[np.ndarray, int, int, float]]:
        for i in range(self.count):
            yield self.vectors[i], int(self.signatures[i]), int(self.labels[i]), float(self.stored_at[i])


def _unit(vector: np.ndarray) -> np.ndarray:
    norm = math.sqrt(float(vector @ vector))
    if norm == 0.0:
        raise InputError("zero payload has no direction")
    return vector / norm


class EdgeServer:
    """One emulated edge server.

    ``clock`` supplies timestamps (virtual in the harness, monotonic when
    served over HTTP). When ``hasher`` is given, stored signatures are
    computed locally; otherwise the balancer-supplied bucket is trusted.
    """

    def __init__(
        self,
        server_id: str,
        services: Sequence[ServiceDef],
        bits: int = 16,
        capacity: int = DEFAULT_CAPACITY,
        hasher: Hasher | None = None,
        group_count: int = DEFAULT_GROUPS,
        clock: Callable[[], float] = time.monotonic,
        alpha: float = 0.5,
    ):
        if not services:
            raise InputError("an edge server needs at least one service")
        self.server_id = server_id
        self.services = {s.name: s for s in services}
        self.dim = services[0].dim
        if any(s.dim != self.dim for s in services):
            raise InputError("services disagree on dimension")
        self.bits = bits
        self.capacity = capacity
        self.hasher = hasher
        self.group_count = group_count
        self.clock = clock
        self.failed = False
        self.caches = {name: ReuseCache(self.dim, capacity) for name in self.services}
        self.cpu = Ewma(alpha)
        self.busy_ms = 0.0
        self.window_start = clock()
        self.group_tasks: dict[int, int] = {}
        self.from_scratch = 0
        self.reused = 0
        self.migrated_in = 0
        self.migrated_out = 0
        self.lock = threading.RLock()

    # task path

    def execute_from_scratch(self, service: str, payload: np.ndarray) -> ResultValue:
        svc = self.services.get(service)
        if svc is None:
            raise KeyError(service)
        self.busy_ms += svc.cost_ms
        self.from_scratch += 1
        return ResultValue(svc.classify(payload), FROM_SCRATCH)

    def handle_task(self, req: TaskRequest, bucket: int | None = None) -> TaskResponse:
        if self.failed:
            raise ConnectionError(f"{self.server_id} is down")
        cache = self.caches.get(req.service)
        if cache is None:
            return TaskResponse(req.task_id, None, status=404, error=f"unknown service {req.service}",
                                server=self.server_id)
        payload = req.payload
        if payload.shape[0] != self.dim:
            return TaskResponse(req.task_id, None, status=400, error="dimension mismatch", server=self.server_id)
        unit = _unit(payload)
        if self.hasher is not None:
            signature = hash_vector(self.hasher, payload)
        elif bucket is not None:
            signature = bucket
        elif req.precomputed_signature is not None:
            signature = req.precomputed_signature
        else:
            raise InputError("no signature available for the task")
        with self.lock:
            gid = (signature * self.group_count) >> self.bits
            self.group_tasks[gid] = self.group_tasks.get(gid, 0) + 1
            idx, sim = cache.nearest(unit)
            if idx >= 0:
                sim = min(1.0, sim)
            if idx >= 0 and sim >= req.threshold:
                self.reused += 1
                result = ResultValue(int(cache.labels[idx]), REUSED)
                return TaskResponse(req.task_id, result, True, sim, self.emit_piggyback(gid), self.server_id)
            result = self.execute_from_scratch(req.service, payload)
            cache.add(payload, unit, signature, result.label, self.clock())
            self.evict_if_full()
            return TaskResponse(
                req.task_id, result, False, sim if idx >= 0 else None, self.emit_piggyback(gid), self.server_id
            )

    def evict_if_full(self) -> int:
        evicted = 0
        for cache in self.caches.values():
            if cache.count > self.capacity:
                evicted += cache.evict_oldest(cache.count - self.capacity)
        return evicted

    # resource reporting

    def cache_entries(self) -> int:
        return sum(c.count for c in self.caches.values())

    def mem_fraction(self) -> float:
        return min(1.0, self.cache_entries() / (self.capacity * len(self.caches)))

    def emit_piggyback(self, gid: int | None = None) -> dict[str, str]:
        groups = {gid: self.group_tasks[gid]} if gid is not None else None
        return encode_piggyback(self.cpu.value, self.mem_fraction(), groups)

    def report_stats(self, now: float | None = None) -> StatsReport:
        """Close the reporting interval: fold busy time into the CPU average and reset counters."""
        with self.lock:
            now = self.clock() if now is None else now
            elapsed_ms = (now - self.window_start) * 1000.0
            if elapsed_ms > 0:
                self.cpu.update(min(1.0, self.busy_ms / elapsed_ms))
            self.busy_ms = 0.0
            self.window_start = now
            mem = self.mem_fraction()
            cpu = self.cpu.value
            per_group = tuple((g, n, cpu, mem) for g, n in sorted(self.group_tasks.items()))
            self.group_tasks = {}
            return StatsReport(self.server_id, cpu, mem, per_group)

    # warm start

    def take_entries(self, lo: int, hi: int) -> list[ReuseCacheEntry]:
        with self.lock:
            out = []
            for name, cache in self.caches.items():
                for vector, sig, label, stored_at in cache.take_range(lo, hi):
                    out.append(ReuseCacheEntry(name, vector, sig, ResultValue(label), stored_at))
            self.migrated_out += len(out)
            return out

    def restore_entries(self, entries: Iterable[ReuseCacheEntry]) -> int:
        with self.lock:
            n = 0
            for e in entries:
                cache = self.caches.get(e.service)
                if cache is None:
                    continue
                vector = np.ascontiguousarray(e.vector, dtype=np.float64)
                cache.add(vector, _unit(vector), e.signature, e.result.label, e.stored_at)
                n += 1
            self.evict_if_full()
            return n

    def receive_entries(self, entries: Iterable[ReuseCacheEntry]) -> int:
        if self.failed:
            raise ConnectionError(f"{self.server_id} is down")
        n = self.restore_entries(entries)
        self.migrated_in += n
        return n

    def migrate_entries(self, lo: int, hi: int, send: Callable[[list[ReuseCacheEntry]], int]) -> int:
        """Move entries with signatures in ``[lo, hi]`` through ``send``; keep them if it fails."""
        entries = self.take_entries(lo, hi)
        if not entries:
            return 0
        try:
            moved = send(entries)
        except (ConnectionError, OSError, TimeoutError):
            self.restore_entries(entries)
            self.migrated_out -= len(entries)
            raise
        return moved

    def set_failed(self, flag: bool) -> None:
        self.failed = flag

    def cache_stats(self) -> dict:
        return {
            "server": self.server_id,
            "entries": {name: c.count for name, c in self.caches.items()},
            "from_scratch": self.from_scratch,
            "reused": self.reused,
            "migrated_in": self.migrated_in,
            "migrated_out": self.migrated_out,
            "failed": self.failed,
        }
