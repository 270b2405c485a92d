import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deduplicator.errors import InputError
from deduplicator.harness import (
    CSV_COLUMNS,
    DeploymentParams,
    ExperimentReport,
    ReuseCandidates,
    adapt_threshold,
    average,
    build_deployment,
    emit_csv,
    estimate_accuracy,
    failure_and_addition_scenario,
    replay,
    reuse_accuracy_oracle,
    reuse_candidates,
    run_experiment,
    summarize,
    threshold_trajectory,
)
from deduplicator.strategies import BASELINES, REUSE_STRATEGIES, Strategy
from deduplicator.workload import WorkloadConfig, generate_workload

SMALL = WorkloadConfig(tasks=1500, clusters=20)


def run_once(strategy, cfg=SMALL, **params):
    w = generate_workload(cfg)
    dep = build_deployment(strategy, w, DeploymentParams(**params))
    run = replay(dep, w)
    return summarize(run, w, dep.services), run, dep, w


# threshold adaptation


def groups_with_accuracy(correct, total, per_group=20):
    pairs = [(1, 1)] * correct + [(1, 2)] * (total - correct)
    return [pairs[i:i + per_group] for i in range(0, total, per_group)]


def test_accuracy_estimate():
    assert estimate_accuracy(groups_with_accuracy(80, 100)) == 80.0
    assert estimate_accuracy([]) is None
    assert estimate_accuracy([[], []]) is None


def test_perfect_accuracy_lowers_threshold():
    assert adapt_threshold(0.9, groups_with_accuracy(100, 100), 90.0) == pytest.approx(0.89)


def test_low_accuracy_raises_threshold():
    assert adapt_threshold(0.9, groups_with_accuracy(80, 100), 90.0) == pytest.approx(0.91)


def test_accuracy_inside_band_keeps_threshold():
    assert adapt_threshold(0.9, groups_with_accuracy(93, 100), 90.0) == 0.9
    assert adapt_threshold(0.9, groups_with_accuracy(90, 100), 90.0) == 0.9


def test_empty_sample_keeps_threshold():
    assert adapt_threshold(0.9, [], 90.0) == 0.9


def test_threshold_is_clamped():
    assert adapt_threshold(1.0, groups_with_accuracy(0, 20), 90.0) == 1.0
    assert adapt_threshold(0.0, groups_with_accuracy(20, 20), 90.0) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1), st.integers(0, 100), st.floats(50, 99))
def test_adaptation_moves_at_most_one_step(current, correct, target):
    new = adapt_threshold(current, groups_with_accuracy(correct, 100), target)
    assert 0.0 <= new <= 1.0
    assert abs(new - current) <= 0.01 + 1e-9


def test_trajectory_on_synthetic_candidates():
    # labels agree exactly when similarity >= 0.8
    sim = np.linspace(0.5, 1.0, 501)
    cands = ReuseCandidates(sim, np.zeros(501, int), np.where(sim >= 0.8, 0, 1))
    path = threshold_trajectory(cands, 0.95, 90.0, rounds=300, group_size=50)
    assert path[0] == 0.95
    tail = path[-50:]
    assert min(tail) >= 0.74 and max(tail) <= 0.86


def test_trajectory_on_workload_converges_near_target():
    cfg = WorkloadConfig(clusters=400, intra_similarity=0.85, tasks=4000)
    cands = reuse_candidates(generate_workload(cfg), 2000)
    path = threshold_trajectory(cands, 0.9, 90.0, rounds=150)
    tail = np.array(path[-50:])
    accs = [100.0 * np.mean(cands.reused_label[cands.pairs_at(t)] == cands.fresh_label[cands.pairs_at(t)])
            for t in tail]
    assert 85.0 <= np.mean(accs) <= 97.0


def test_reuse_candidates_rejects_bad_warmup():
    w = generate_workload(WorkloadConfig(tasks=10))
    with pytest.raises(InputError):
        reuse_candidates(w, 10)


# experiment metrics


@pytest.mark.parametrize("strategy", list(Strategy))
def test_metrics_are_consistent(strategy):
    report, run, _, w = run_once(strategy)
    assert len(run.task_index) == len(w)
    assert sum(report.per_server_share) == pytest.approx(100.0)
    assert 0.0 <= report.percent_reuse <= 100.0
    assert report.errors == 0
    assert report.overhead_p99_ms >= report.overhead_p50_ms >= 0.0
    assert len(run.decision_ns) == len(w)


def test_single_server_share():
    report, *_ = run_once(Strategy.REUSE_ADAPTIVE, servers=1)
    assert report.per_server_share == [100.0]


def test_identical_payloads_reuse_all_but_first():
    cfg = WorkloadConfig(tasks=200, clusters=1, intra_similarity=0.9999999)
    for strategy in REUSE_STRATEGIES:
        w = generate_workload(cfg)
        w.payloads[:] = w.payloads[0]
        dep = build_deployment(strategy, w, DeploymentParams())
        report = summarize(replay(dep, w), w, dep.services)
        assert report.percent_reuse == pytest.approx(100.0 * 199 / 200)
        assert report.reuse_accuracy == 100.0


def test_accuracy_oracle_catches_wrong_reuse():
    w = generate_workload(WorkloadConfig(tasks=2, dim=2, clusters=2, orthogonal_clusters=True))
    # two close payloads straddling the boundary between the two scenes
    c0, c1 = w.centroids
    mid = np.arctan2(*(c0 + c1)[::-1])
    w.payloads[0] = np.array([np.cos(mid - 0.05), np.sin(mid - 0.05)])
    w.payloads[1] = np.array([np.cos(mid + 0.05), np.sin(mid + 0.05)])
    svc = build_deployment(Strategy.REUSE_IDEAL, w, DeploymentParams(servers=1)).services["detect"]
    assert svc.classify(w.payloads[0]) != svc.classify(w.payloads[1])
    dep = build_deployment(Strategy.REUSE_IDEAL, w, DeploymentParams(servers=1))
    run = replay(dep, w, threshold=0.9)
    assert run.reused == [False, True]
    assert reuse_accuracy_oracle(run, w, dep.services) == 0.0


def test_accuracy_oracle_without_reuse_is_none():
    report, run, dep, w = run_once(Strategy.ROUND_ROBIN, WorkloadConfig(tasks=50), servers=2)
    run.reused = [False] * len(run.reused)
    assert reuse_accuracy_oracle(run, w, dep.services) is None


def test_run_experiment_is_deterministic():
    a = run_experiment(Strategy.REUSE_ADAPTIVE, DeploymentParams(record_timings=False), SMALL, reps=2)
    b = run_experiment(Strategy.REUSE_ADAPTIVE, DeploymentParams(record_timings=False), SMALL, reps=2)
    assert a.percent_reuse == b.percent_reuse and a.per_server_share == b.per_server_share
    assert a.reps == 2


def test_average():
    r1 = ExperimentReport("x", 2, 10.0, [40.0, 60.0], None, 1.0, 2.0, 1, 0)
    r2 = ExperimentReport("x", 2, 20.0, [60.0, 40.0], 90.0, 3.0, 4.0, 3, 10)
    m = average([r1, r2])
    assert m.percent_reuse == 15.0 and m.per_server_share == [50.0, 50.0]
    assert m.reuse_accuracy == 90.0 and m.reps == 2
    with pytest.raises(ValueError):
        average([])


def test_reuse_aware_beats_baselines_on_small_run():
    aware, *_ = run_once(Strategy.REUSE_ADAPTIVE)
    for b in BASELINES:
        unaware, *_ = run_once(b)
        assert aware.percent_reuse > unaware.percent_reuse


def test_padded_requests_go_through_wire_format():
    cfg = WorkloadConfig(tasks=100, pad_bytes=10_000)
    report, run, *_ = run_once(Strategy.REUSE_VANILLA, cfg)
    plain, *_ = run_once(Strategy.REUSE_VANILLA, WorkloadConfig(tasks=100))
    assert report.errors == 0
    assert report.percent_reuse == plain.percent_reuse


# CSV


def test_csv_schema():
    reports = [run_once(s)[0] for s in (Strategy.REUSE_ADAPTIVE, Strategy.RANDOM)]
    buf = io.StringIO()
    n = emit_csv(reports, buf)
    rows = list(csv.reader(io.StringIO(buf.getvalue())))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == n + 1
    shares = [r for r in rows[1:] if r[2] == "per_server_share"]
    assert [r[4] for r in shares] == ["0", "1", "2"] * 2
    assert all(r[4] == "" for r in rows[1:] if r[2] != "per_server_share")
    assert {r[0] for r in rows[1:]} == {"reuse-adaptive", "random"}


def test_csv_writes_na_accuracy(tmp_path):
    r = ExperimentReport("round_robin", 1, 0.0, [100.0], None, 0.0, 0.0, 0, 0)
    path = tmp_path / "out.csv"
    emit_csv([r], path)
    rows = list(csv.DictReader(path.open()))
    assert next(r["value"] for r in rows if r["metric"] == "reuse_accuracy") == "NA"


# scripted failure and addition


@pytest.fixture(scope="module")
def scenario():
    return failure_and_addition_scenario(cfg=WorkloadConfig(tasks=3000))


def test_scenario_detects_failure(scenario):
    assert scenario.detected_at is not None
    assert scenario.failed_at < scenario.detected_at < scenario.failed_at + 5.0


def test_scenario_keeps_partition(scenario):
    assert scenario.tables_valid


def test_scenario_stops_routing_to_failed(scenario):
    assert scenario.routed_to_failed_after_detection == 0


def test_scenario_new_server_gets_work(scenario):
    assert scenario.added == "S4" and scenario.added_share_within_interval > 0
    kinds = [e.kind for e in scenario.events]
    assert kinds.index("register") < kinds.index("failure")


def test_scenario_only_errors_while_undetected(scenario):
    step = 0.01
    for i, status in zip(scenario.run.task_index, scenario.run.status):
        if status != 200:
            assert scenario.failed_at <= i * step <= scenario.detected_at


@pytest.mark.parametrize("strategy", [Strategy.ROUND_ROBIN, Strategy.CONSISTENT_HASH, Strategy.REUSE_MINI_BUCKETS])
def test_scenario_under_other_strategies(strategy):
    res = failure_and_addition_scenario(strategy, cfg=WorkloadConfig(tasks=1500))
    assert res.tables_valid and res.routed_to_failed_after_detection == 0
    assert res.added_share_within_interval > 0
