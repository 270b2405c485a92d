"""Task distribution strategies: four reuse-aware ones that route on the hash
table, and the usual reuse-unaware baselines."""

from __future__ import annotations

import bisect
import enum
import hashlib
import random
import threading
from typing import Callable, Sequence

from deduplicator.errors import NoLiveServers
from deduplicator.slices import ServerId, Slice, SliceTable, initial_equal, equal_sizes


class Strategy(str, enum.Enum):
    REUSE_IDEAL = "reuse-ideal"
    REUSE_VANILLA = "reuse-vanilla"
    REUSE_MINI_BUCKETS = "reuse-mini-buckets"
    REUSE_ADAPTIVE = "reuse-adaptive"
    ROUND_ROBIN = "round-robin"
    RANDOM = "random"
    LEAST_CONNECTION = "least-connection"
    CONSISTENT_HASH = "consistent-hash"

    @property
    def reuse_aware(self) -> bool:
        return self in REUSE_STRATEGIES

    @classmethod
    def parse(cls, name: str) -> "Strategy":
        key = name.strip().lower().replace("_", "-")
        for s in cls:
            if s.value == key or s.name.lower().replace("_", "-") == key:
                return s
        raise ValueError(f"unknown strategy {name!r}; choose from {[s.value for s in cls]}")


REUSE_STRATEGIES = (
    Strategy.REUSE_IDEAL,
    Strategy.REUSE_VANILLA,
    Strategy.REUSE_MINI_BUCKETS,
    Strategy.REUSE_ADAPTIVE,
)
BASELINES = (
    Strategy.ROUND_ROBIN,
    Strategy.RANDOM,
    Strategy.LEAST_CONNECTION,
    Strategy.CONSISTENT_HASH,
)


def ideal_table(servers: Sequence[ServerId], bits: int) -> SliceTable:
    if not servers:
        return SliceTable(bits, (), ())
    return SliceTable(bits, (Slice(0, (1 << bits) - 1, servers[0]),), tuple(servers))


def mini_buckets_table(servers: Sequence[ServerId], bits: int) -> SliceTable:
    """``n`` major slices, each cut into ``n`` sub-slices; sub-slice ``j`` goes to server ``j``."""
    n = len(servers)
    if n == 0:
        return SliceTable(bits, (), ())
    slices = []
    for major in initial_equal(list(servers), bits).slices:
        lo = major.lo
        for j, size in enumerate(equal_sizes(major.size, n)):
            if size:
                slices.append(Slice(lo, lo + size - 1, servers[j]))
                lo += size
    table = SliceTable(bits, tuple(slices), tuple(servers))
    table.validate()
    return table


def static_table(strategy: Strategy, servers: Sequence[ServerId], bits: int) -> SliceTable:
    if strategy is Strategy.REUSE_IDEAL:
        return ideal_table(servers, bits)
    if strategy is Strategy.REUSE_MINI_BUCKETS:
        return mini_buckets_table(servers, bits)
    return initial_equal(list(servers), bits)


class RoundRobin:
    def __init__(self, servers: Sequence[ServerId] = ()):
        self.servers = list(servers)
        self.cursor = 0
        self._lock = threading.Lock()

    def select(self, client_id: str) -> ServerId:
        with self._lock:
            if not self.servers:
                raise NoLiveServers("no live servers")
            server = self.servers[self.cursor % len(self.servers)]
            self.cursor += 1
            return server

    def add(self, server: ServerId) -> None:
        with self._lock:
            self.servers.append(server)

    def remove(self, server: ServerId) -> None:
        with self._lock:
            if server in self.servers:
                idx = self.servers.index(server)
                self.servers.remove(server)
                if self.servers and idx < self.cursor % (len(self.servers) + 1):
                    self.cursor -= 1


class RandomChoice:
    def __init__(self, servers: Sequence[ServerId] = (), seed: int = 0):
        self.servers = list(servers)
        self.rng = random.Random(seed)
        self._lock = threading.Lock()

    def select(self, client_id: str) -> ServerId:
        with self._lock:
            if not self.servers:
                raise NoLiveServers("no live servers")
            return self.servers[self.rng.randrange(len(self.servers))]

    def add(self, server: ServerId) -> None:
        self.servers.append(server)

    def remove(self, server: ServerId) -> None:
        if server in self.servers:
            self.servers.remove(server)


class LeastConnection:
    """Fewest in-flight requests; ties rotate so idle servers share the load."""

    def __init__(self, servers: Sequence[ServerId], inflight: Callable[[ServerId], int]):
        self.servers = list(servers)
        self.inflight = inflight
        self.cursor = 0
        self._lock = threading.Lock()

    def select(self, client_id: str) -> ServerId:
        with self._lock:
            n = len(self.servers)
            if not n:
                raise NoLiveServers("no live servers")
            best = None
            best_load = None
            for k in range(n):
                server = self.servers[(self.cursor + k) % n]
                load = self.inflight(server)
                if best_load is None or load < best_load:
                    best, best_load = server, load
            self.cursor = (self.servers.index(best) + 1) % n
            return best

    def add(self, server: ServerId) -> None:
        self.servers.append(server)

    def remove(self, server: ServerId) -> None:
        if server in self.servers:
            self.servers.remove(server)
            self.cursor = 0


def _ring_hash(key: str) -> int:
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "big")


class ConsistentHash:
    """64-bit ring keyed by client id, ``vnodes`` points per server."""

    def __init__(self, servers: Sequence[ServerId] = (), vnodes: int = 100):
        self.vnodes = vnodes
        self.points: list[int] = []
        self.owners: list[ServerId] = []
        self._lock = threading.Lock()
        for s in servers:
            self.add(s)

    def add(self, server: ServerId) -> None:
        with self._lock:
            for i in range(self.vnodes):
                h = _ring_hash(f"{server}#{i}")
                idx = bisect.bisect_left(self.points, h)
                self.points.insert(idx, h)
                self.owners.insert(idx, server)

    def remove(self, server: ServerId) -> None:
        with self._lock:
            keep = [(p, o) for p, o in zip(self.points, self.owners) if o != server]
            self.points = [p for p, _ in keep]
            self.owners = [o for _, o in keep]

    def select(self, client_id: str) -> ServerId:
        points, owners = self.points, self.owners
        if not points:
            raise NoLiveServers("no live servers")
        idx = bisect.bisect_right(points, _ring_hash(client_id))
        return owners[idx % len(owners)]
