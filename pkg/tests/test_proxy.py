import numpy as np
import pytest

from deduplicator.edge import EdgeServer, random_service
from deduplicator.errors import NoLiveServers
from deduplicator.messages import TaskRequest, encode_payload, request_headers
from deduplicator.proxy import Deduplicator, InProcessBackend, ProxyConfig, strip_piggyback
from deduplicator.slices import SliceTable
from deduplicator.stats import HEADER_CPU, HEADER_GROUPS, HEADER_MEM, StatsReport
from deduplicator.strategies import (
    BASELINES,
    REUSE_STRATEGIES,
    ConsistentHash,
    LeastConnection,
    RandomChoice,
    RoundRobin,
    Strategy,
    mini_buckets_table,
)


class Clock:
    def __init__(self):
        self.now = 0.0

    def __call__(self):
        return self.now


def deployment(strategy, n=3, bits=16, dim=4, **cfg):
    clock = Clock()
    proxy = Deduplicator(ProxyConfig(strategy=strategy, bits=bits, dim=dim, **cfg), clock=clock)
    svc = random_service("detect", 10, dim, seed=0)
    edges = [EdgeServer(f"S{i + 1}", [svc], bits=bits, clock=clock) for i in range(n)]
    proxy.strategy_init([InProcessBackend(e) for e in edges])
    return proxy, edges, clock


def request(v, tid="t", threshold=0.9, client="c", sig=None):
    return TaskRequest(tid, "detect", threshold, np.asarray(v, dtype=float), client, sig)


def ranges(t):
    return [(s.lo, s.hi, s.server) for s in t.slices]


# strategy initial state


def test_strategy_names():
    assert Strategy.parse("reuse_adaptive") is Strategy.REUSE_ADAPTIVE
    assert Strategy.parse("ROUND-ROBIN") is Strategy.ROUND_ROBIN
    with pytest.raises(ValueError):
        Strategy.parse("fastest")
    assert all(s.reuse_aware for s in REUSE_STRATEGIES)
    assert not any(s.reuse_aware for s in BASELINES)


def test_mini_buckets_layout():
    t = mini_buckets_table(["S1", "S2"], 4)
    assert ranges(t) == [(0, 3, "S1"), (4, 7, "S2"), (8, 11, "S1"), (12, 15, "S2")]


def test_ideal_sends_everything_to_first():
    proxy, _, _ = deployment(Strategy.REUSE_IDEAL)
    assert ranges(proxy.table) == [(0, 65535, "S1")]


def test_vanilla_initial_table():
    proxy, _, _ = deployment(Strategy.REUSE_VANILLA)
    assert ranges(proxy.table) == [(0, 21845, "S1"), (21846, 43690, "S2"), (43691, 65535, "S3")]


def test_vanilla_routes_by_reference_table():
    proxy, _, _ = deployment(Strategy.REUSE_VANILLA)
    proxy.table = SliceTable.from_json(
        {"bits": 16, "slices": [{"lo": 0, "hi": 21844, "server": "S1"}, {"lo": 21845, "hi": 43689, "server": "S2"},
                                {"lo": 43690, "hi": 65535, "server": "S3"}]}
    )
    assert proxy.route(request(np.ones(4), sig=30000)).server == "S2"


@pytest.mark.parametrize("strategy", REUSE_STRATEGIES)
def test_identical_payloads_same_server(strategy, rng):
    proxy, _, _ = deployment(strategy)
    for _ in range(20):
        v = rng.standard_normal(4)
        assert proxy.route(request(v)).server == proxy.route(request(v)).server


def test_round_robin_is_exact():
    proxy, _, _ = deployment(Strategy.ROUND_ROBIN)
    got = [proxy.route(request(np.ones(4))).server for _ in range(6)]
    assert sorted(got) == ["S1", "S1", "S2", "S2", "S3", "S3"]
    assert got[:3] == ["S1", "S2", "S3"]


def test_random_is_seeded():
    a = RandomChoice(["S1", "S2", "S3"], seed=4)
    b = RandomChoice(["S1", "S2", "S3"], seed=4)
    assert [a.select("") for _ in range(20)] == [b.select("") for _ in range(20)]


def test_least_connection_prefers_idle():
    inflight = {"S1": 2, "S2": 0, "S3": 1}
    lc = LeastConnection(["S1", "S2", "S3"], inflight.get)
    assert lc.select("") == "S2"
    inflight["S2"] = 5
    assert lc.select("") == "S3"


def test_least_connection_rotates_ties():
    lc = LeastConnection(["S1", "S2", "S3"], lambda s: 0)
    assert [lc.select("") for _ in range(4)] == ["S1", "S2", "S3", "S1"]


def test_consistent_hash_is_sticky_per_client():
    ring = ConsistentHash(["S1", "S2", "S3"], vnodes=100)
    assert len(ring.points) == 300
    first = {f"c{i}": ring.select(f"c{i}") for i in range(200)}
    assert all(ring.select(c) == s for c, s in first.items())
    assert set(first.values()) == {"S1", "S2", "S3"}
    ring.remove("S2")
    moved = [c for c, s in first.items() if s != "S2" and ring.select(c) != s]
    assert moved == []


def test_empty_routers():
    for router in (RoundRobin(), RandomChoice(), LeastConnection([], lambda s: 0), ConsistentHash()):
        with pytest.raises(NoLiveServers):
            router.select("c")


def test_round_robin_removal_keeps_rotation():
    rr = RoundRobin(["S1", "S2", "S3"])
    assert rr.select("") == "S1"
    rr.remove("S2")
    assert [rr.select("") for _ in range(4)] == ["S3", "S1", "S3", "S1"]


# data path


@pytest.mark.parametrize("strategy", list(Strategy))
def test_every_bucket_routes_to_a_live_server(strategy):
    proxy, _, _ = deployment(strategy, bits=8)
    live = set(proxy.servers)
    for b in range(256):
        d = proxy.route(request(np.ones(4), sig=b, client=f"c{b}"))
        assert d.server in live


def test_reuse_hit_is_relayed_and_piggyback_stripped():
    proxy, _, _ = deployment(Strategy.REUSE_VANILLA)
    v = [1.0, 2.0, 3.0, 4.0]
    first = proxy.handle_task(request(v, "a"))
    second = proxy.handle_task(request(v, "b"))
    assert not first.reused and second.reused
    for resp in (first, second):
        assert not {HEADER_CPU, HEADER_MEM, HEADER_GROUPS} & set(resp.headers)
    assert proxy.stats.health[second.server].mem.initialized


def test_strip_piggyback_case_insensitive():
    assert strip_piggyback({"x-cpu-load": "1", "X-Reused": "1"}) == {"X-Reused": "1"}


def test_backend_down_gives_timeout_error():
    proxy, edges, _ = deployment(Strategy.ROUND_ROBIN)
    edges[0].set_failed(True)
    resp = proxy.handle_task(request(np.ones(4)))
    assert resp.status == 504 and proxy.stats.health["S1"].stalled


def test_no_live_servers():
    proxy = Deduplicator(ProxyConfig(strategy=Strategy.REUSE_VANILLA, dim=4))
    assert proxy.handle_task(request(np.ones(4))).status == 503


def test_bad_signature_is_client_error():
    proxy, _, _ = deployment(Strategy.REUSE_VANILLA, bits=8)
    assert proxy.handle_task(request(np.ones(4), sig=256)).status == 400


def test_raw_request_path():
    proxy, _, _ = deployment(Strategy.REUSE_VANILLA)
    req = request([1.0, 0.0, 0.0, 0.0])
    resp = proxy.handle_raw("detect", request_headers(req), encode_payload(req.payload, 4096))
    assert resp.ok
    assert proxy.handle_raw("detect", {}, b"[1,2,3,4]").status == 400
    assert proxy.handle_raw("detect", request_headers(req), b"[1,2]").status == 400


def test_user_assisted_signature_is_used():
    proxy, _, _ = deployment(Strategy.REUSE_VANILLA)
    assert proxy.route(request(np.ones(4), sig=0)).server == "S1"
    assert proxy.route(request(np.ones(4), sig=65535)).server == "S3"


# control path


def test_redistribution_equal_loads():
    proxy, _, _ = deployment(Strategy.REUSE_ADAPTIVE, n=2, bits=4)
    for b in (0, 1, 8, 9):
        proxy.route(request(np.ones(4), sig=b))
    before = ranges(proxy.table)
    assert proxy.redistribution_tick()
    assert proxy.table.epoch == 1 and ranges(proxy.table) == before


def test_redistribution_skewed_loads():
    proxy, _, _ = deployment(Strategy.REUSE_ADAPTIVE, n=2, bits=4)
    for b in [0, 1, 2, 8]:
        proxy.route(request(np.ones(4), sig=b))
    proxy.redistribution_tick()
    assert ranges(proxy.table) == [(0, 3, "S1"), (4, 15, "S2")]


def test_redistribution_without_traffic_is_noop():
    proxy, _, _ = deployment(Strategy.REUSE_ADAPTIVE)
    assert not proxy.redistribution_tick()
    assert proxy.table.epoch == 0


def test_redistribution_only_for_adaptive():
    proxy, _, _ = deployment(Strategy.REUSE_VANILLA)
    proxy.route(request(np.ones(4)))
    assert not proxy.redistribution_tick()


def test_redistribution_migrates_cache():
    proxy, edges, _ = deployment(Strategy.REUSE_ADAPTIVE, n=2, bits=4, dim=4)
    rng = np.random.default_rng(0)
    for i in range(40):
        proxy.handle_task(request(rng.standard_normal(4), str(i), 1.0, sig=int(rng.integers(0, 4))))
    assert edges[0].cache_entries() == 40
    proxy.redistribution_tick()  # all load on S1: it keeps one bucket
    assert ranges(proxy.table)[0] == (0, 0, "S1")
    kept = sum(1 for _, s, _, _ in edges[0].caches["detect"].entries() if s == 0)
    assert edges[0].cache_entries() == kept
    assert edges[1].cache_entries() == 40 - kept == proxy.migrated_entries


def test_register_splits_single_server():
    proxy, _, clock = deployment(Strategy.REUSE_ADAPTIVE, n=1, bits=4)
    new = EdgeServer("S2", [random_service("detect", 10, 4, 0)], bits=4, clock=clock)
    proxy.handle_register(InProcessBackend(new))
    assert ranges(proxy.table) == [(0, 7, "S1"), (8, 15, "S2")]
    kinds = [e.kind for e in proxy.events]
    assert "register" in kinds and "epoch" in kinds


def test_register_duplicate():
    proxy, edges, _ = deployment(Strategy.REUSE_ADAPTIVE)
    with pytest.raises(Exception):
        proxy.handle_register(InProcessBackend(edges[0]))


def test_register_under_baseline():
    proxy, _, clock = deployment(Strategy.ROUND_ROBIN, n=2)
    proxy.handle_register(InProcessBackend(EdgeServer("S3", [random_service("detect", 10, 4, 0)], clock=clock)))
    assert sorted(proxy.route(request(np.ones(4))).server for _ in range(3)) == ["S1", "S2", "S3"]
    assert proxy.table.slices == ()


def test_register_static_strategy_rebuilds():
    proxy, _, clock = deployment(Strategy.REUSE_VANILLA, n=2, bits=4)
    proxy.handle_register(InProcessBackend(EdgeServer("S3", [random_service("detect", 10, 4, 0)], bits=4, clock=clock)))
    assert ranges(proxy.table) == [(0, 5, "S1"), (6, 10, "S2"), (11, 15, "S3")]


def test_failure_of_one_of_two():
    proxy, _, _ = deployment(Strategy.REUSE_ADAPTIVE, n=2, bits=4)
    proxy.handle_failure("S1")
    assert ranges(proxy.table) == [(0, 15, "S2")]


def test_failure_of_middle_server_splits_by_load():
    proxy, _, _ = deployment(Strategy.REUSE_VANILLA, n=3, bits=4)
    for b, n in ((0, 1), (12, 3)):
        for _ in range(n):
            proxy.route(request(np.ones(4), sig=b))
    proxy.handle_failure("S2")
    # S2 had [6,10]; S1 (1 task) takes 3/4
    assert ranges(proxy.table) == [(0, 9, "S1"), (10, 15, "S3")]


def test_failure_under_round_robin():
    proxy, _, _ = deployment(Strategy.ROUND_ROBIN)
    proxy.handle_failure("S2")
    assert {proxy.route(request(np.ones(4))).server for _ in range(6)} == {"S1", "S3"}


def test_last_server_is_kept():
    proxy, _, _ = deployment(Strategy.REUSE_ADAPTIVE, n=1)
    proxy.handle_failure("S1")
    assert proxy.servers == ["S1"]


def test_control_tick_detects_dead_server():
    proxy, edges, clock = deployment(Strategy.REUSE_ADAPTIVE)
    edges[1].set_failed(True)
    for t in (1.0, 2.0, 3.0, 4.0):
        clock.now = t
        for e, b in zip(edges, proxy.backends.values()):
            if not e.failed:
                proxy.ingest_notification(b.report(t))
        proxy.control_tick()
    assert "S2" not in proxy.servers
    assert all(s.server != "S2" for s in proxy.table.slices)
    assert [e.kind for e in proxy.events if e.kind == "failure"] == ["failure"]


def test_notification_from_unknown_server_rejected():
    proxy, _, _ = deployment(Strategy.REUSE_ADAPTIVE)
    with pytest.raises(KeyError):
        proxy.ingest_notification(StatsReport("S9", 0.1, 0.1))


def test_overload_reaction_shrinks_hot_edge():
    proxy, _, clock = deployment(Strategy.REUSE_VANILLA, n=2, reactive=True)
    for _ in range(10):
        proxy.route(request(np.ones(4), sig=32767))  # last group of S1's slice
    proxy.stats.snapshot_window()
    proxy.ingest_notification(StatsReport("S1", 0.99, 0.1))
    proxy.ingest_notification(StatsReport("S2", 0.1, 0.1))
    moves = proxy.rebalance_overloaded()
    assert moves and all(m.source == "S1" and m.target == "S2" for m in moves)
    assert proxy.table.lookup(32767) == "S2"
    proxy.table.validate()


def test_overload_reaction_splits_interior_hot_spot():
    proxy, _, _ = deployment(Strategy.REUSE_VANILLA, n=2, reactive=True)
    for _ in range(10):
        proxy.route(request(np.ones(4), sig=10 * 1024 + 3))
    proxy.stats.snapshot_window()
    proxy.ingest_notification(StatsReport("S1", 0.99, 0.1))
    moves = proxy.rebalance_overloaded()
    assert [(m.lo, m.hi, m.target) for m in moves] == [(10240, 11263, "S2")]


def test_admin_metrics_document():
    proxy, _, _ = deployment(Strategy.REUSE_ADAPTIVE)
    proxy.handle_task(request(np.ones(4)))
    doc = proxy.admin_metrics()
    assert doc["epoch"] == 0 and sum(doc["routed"].values()) == 1
    assert SliceTable.from_json(doc["table"]).validate() is None
    assert set(doc["health"]) == {"S1", "S2", "S3"}
