"""Command-line entry points: ``deduplicator`` (balancer), ``dedup-edge`` and ``harness``."""

from __future__ import annotations

import argparse
import logging
import sys
import threading

from deduplicator.edge import DEFAULT_CAPACITY, DEFAULT_COST_MS, EdgeServer, random_service
from deduplicator.harness import (
    DeploymentParams,
    emit_csv,
    failure_and_addition_scenario,
    reuse_candidates,
    run_experiment,
    threshold_trajectory,
)
from deduplicator.proxy import Deduplicator, ProxyConfig
from deduplicator.strategies import Strategy
from deduplicator.workload import WorkloadConfig, generate_workload


def _host_port(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    try:
        return host or "127.0.0.1", int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}") from None


def _strategy(text: str) -> Strategy:
    try:
        return Strategy.parse(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _logging(verbose: bool) -> None:
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO, format="%(asctime)s %(name)s %(message)s")


def proxy_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="deduplicator", description="Reuse-aware task load balancer")
    p.add_argument("--strategy", type=_strategy, default=Strategy.REUSE_ADAPTIVE)
    p.add_argument("--bits", type=int, default=16)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--listen", type=_host_port, default=("127.0.0.1", 8080))
    p.add_argument("--redistribution-interval", type=float, default=5.0)
    p.add_argument("--group-count", type=int, default=64)
    p.add_argument("--min-slice", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cpu-threshold", type=float, default=0.9)
    p.add_argument("--mem-threshold", type=float, default=0.9)
    p.add_argument("--response-timeout", type=float, default=2.0)
    p.add_argument("--notification-interval", type=float, default=1.0)
    p.add_argument("--reactive", action="store_true", help="also shrink or split slices of overloaded servers")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def proxy_main(argv=None) -> int:
    from deduplicator.service import ProxyHttpServer

    args = proxy_parser().parse_args(argv)
    _logging(args.verbose)
    config = ProxyConfig(
        strategy=args.strategy,
        bits=args.bits,
        dim=args.dim,
        seed=args.seed,
        group_count=args.group_count,
        min_slice=args.min_slice,
        redistribution_interval=args.redistribution_interval,
        cpu_threshold=args.cpu_threshold,
        mem_threshold=args.mem_threshold,
        response_timeout=args.response_timeout,
        notification_interval=args.notification_interval,
        reactive=args.reactive,
    )
    server = ProxyHttpServer(args.listen, Deduplicator(config))
    logging.info("balancing with %s on %s", config.strategy.value, server.address)
    server.start()
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        server.stop()
    return 0


def edge_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dedup-edge", description="Emulated edge server with a reuse cache")
    p.add_argument("--id", required=True, help="server id, e.g. S1")
    p.add_argument("--listen", type=_host_port, default=("127.0.0.1", 9001))
    p.add_argument("--proxy", help="balancer address to register with, e.g. http://127.0.0.1:8080")
    p.add_argument("--advertise", help="address the balancer should use to reach this server")
    p.add_argument("--services", default="detect", help="comma-separated service names")
    p.add_argument("--labels", type=int, default=50, help="distinct results per service")
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--bits", type=int, default=16)
    p.add_argument("--seed", type=int, default=0, help="seed for the stand-in services; share it across servers")
    p.add_argument("--capacity", type=int, default=DEFAULT_CAPACITY)
    p.add_argument("--cost-ms", type=float, default=DEFAULT_COST_MS)
    p.add_argument("--group-count", type=int, default=64)
    p.add_argument("--report-interval", type=float, default=1.0)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def edge_main(argv=None) -> int:
    from deduplicator.service import EdgeHttpServer

    args = edge_parser().parse_args(argv)
    _logging(args.verbose)
    names = [s.strip() for s in args.services.split(",") if s.strip()]
    services = [random_service(n, args.labels, args.dim, args.seed + i, args.cost_ms) for i, n in enumerate(names)]
    edge = EdgeServer(args.id, services, bits=args.bits, capacity=args.capacity, group_count=args.group_count)
    server = EdgeHttpServer(args.listen, edge, args.proxy, args.report_interval, args.advertise)
    server.start()
    logging.info("edge %s serving on %s", args.id, server.address)
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        server.stop()
    return 0


def _workload_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--clusters", type=int, default=50)
    p.add_argument("--intra-sim", type=float, default=0.95)
    p.add_argument("--zipf", type=float, default=1.1)
    p.add_argument("--tasks", type=int, default=10_000)
    p.add_argument("--threshold", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pad-bytes", type=int, default=0, help="pad each request body to this many bytes")


def _deploy_args(p: argparse.ArgumentParser, servers: int) -> None:
    p.add_argument("--servers", type=int, default=servers)
    p.add_argument("--bits", type=int, default=16)
    p.add_argument("--redistribution-interval", type=float, default=5.0)
    p.add_argument("--group-count", type=int, default=64)
    p.add_argument("--min-slice", type=int, default=1)
    p.add_argument("--rate", type=float, default=100.0, help="tasks per virtual second")
    p.add_argument("--user-assisted", action="store_true", help="clients send precomputed signatures")


def harness_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="harness", description="Experiment driver")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="replay a workload under one or more strategies")
    run.add_argument("--strategy", default="all", help="strategy name, comma list, or 'all'")
    _workload_args(run)
    _deploy_args(run, 3)
    run.add_argument("--reps", type=int, default=10)
    run.add_argument("--out", default="-", help="CSV path, '-' for stdout")

    scen = sub.add_parser("scenario", help="scripted deployment changes")
    scen_sub = scen.add_subparsers(dest="scenario", required=True)
    af = scen_sub.add_parser("add-fail", help="add a server a third of the way in, fail one at two thirds")
    af.add_argument("--strategy", type=_strategy, default=Strategy.REUSE_ADAPTIVE)
    af.add_argument("--fail", default="S2", help="server to fail")
    _workload_args(af)
    _deploy_args(af, 3)
    af.add_argument("--out", default="-")

    at = sub.add_parser("adapt-threshold", help="tune the similarity threshold by sampled accuracy")
    _workload_args(at)
    at.add_argument("--target", type=float, default=90.0, help="target accuracy in percent")
    at.add_argument("--margin", type=float, default=5.0)
    at.add_argument("--step", type=float, default=0.01)
    at.add_argument("--rounds", type=int, default=100)
    at.add_argument("--groups", type=int, default=5)
    at.add_argument("--group-size", type=int, default=20)
    at.add_argument("--warmup", type=int, default=None, help="tasks cached before sampling (default half)")
    return p


def _workload_config(args) -> WorkloadConfig:
    return WorkloadConfig(
        dim=args.dim,
        clusters=args.clusters,
        intra_similarity=args.intra_sim,
        zipf_s=args.zipf,
        tasks=args.tasks,
        threshold=args.threshold,
        seed=args.seed,
        pad_bytes=args.pad_bytes,
    )


def _deployment(args) -> DeploymentParams:
    return DeploymentParams(
        servers=args.servers,
        bits=args.bits,
        seed=args.seed,
        rate=args.rate,
        redistribution_interval=args.redistribution_interval,
        group_count=args.group_count,
        min_slice=args.min_slice,
        user_assisted=args.user_assisted,
    )


def _write_csv(reports, out: str) -> None:
    if out == "-":
        emit_csv(reports, sys.stdout)
    else:
        emit_csv(reports, out)


def harness_main(argv=None) -> int:
    args = harness_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING)
    if args.command == "run":
        if args.strategy == "all":
            strategies = list(Strategy)
        else:
            strategies = [_strategy(s) for s in args.strategy.split(",")]
        cfg = _workload_config(args)
        params = _deployment(args)
        reports = [run_experiment(s, params, cfg, args.reps) for s in strategies]
        _write_csv(reports, args.out)
        return 0 if all(r.valid for r in reports) else 1
    if args.command == "scenario":
        result = failure_and_addition_scenario(
            args.strategy, _deployment(args), _workload_config(args), fail_server=args.fail
        )
        _write_csv([result.report], args.out)
        for ev in result.events:
            if ev.kind in ("register", "failure"):
                print(f"# t={ev.at:.2f} {ev.kind} {ev.detail.get('server')}", file=sys.stderr)
        print(
            f"# tables_valid={result.tables_valid} "
            f"routed_to_failed_after_detection={result.routed_to_failed_after_detection} "
            f"new_server_tasks_first_interval={result.added_share_within_interval}",
            file=sys.stderr,
        )
        ok = result.tables_valid and result.routed_to_failed_after_detection == 0
        return 0 if ok else 1
    cfg = _workload_config(args)
    workload = generate_workload(cfg)
    warmup = args.warmup if args.warmup is not None else len(workload) // 2
    path = threshold_trajectory(
        reuse_candidates(workload, warmup),
        cfg.threshold,
        args.target,
        rounds=args.rounds,
        group_count=args.groups,
        group_size=args.group_size,
        step=args.step,
        margin=args.margin,
        seed=cfg.seed,
    )
    print("round,threshold")
    for i, t in enumerate(path):
        print(f"{i},{t:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(harness_main())
