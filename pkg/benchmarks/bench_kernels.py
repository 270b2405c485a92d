"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--number N] [--replay]

Prints per-call time for each kernel and backend, and with ``--replay`` the
wall time of one 10k-task replay under ReuseAdaptive on each backend.
"""

from __future__ import annotations

import argparse
import time
import timeit

import numpy as np

from deduplicator import kernels
from deduplicator.harness import DeploymentParams, build_deployment, replay
from deduplicator.strategies import Strategy
from deduplicator.workload import WorkloadConfig, generate_workload

KERNELS = ("signature", "nearest", "argmax_rows", "find_slice")


def cases(rng: np.random.Generator) -> dict[str, tuple[str, tuple]]:
    planes = rng.standard_normal((16, 16))
    vec = rng.standard_normal(16)
    cache = rng.standard_normal((10_000, 16))
    scenes = rng.standard_normal((50, 16))
    starts = np.sort(rng.choice(1 << 16, size=64, replace=False)).astype(np.uint64)
    starts[0] = 0
    return {
        "signature b=16 d=16": ("signature", (planes, vec)),
        "nearest 1k x 16": ("nearest", (cache, 1000, vec)),
        "nearest 10k x 16": ("nearest", (cache, 10_000, vec)),
        "argmax_rows 50 x 16": ("argmax_rows", (scenes, vec)),
        "find_slice 64 slices": ("find_slice", (starts, 40_000)),
    }


def per_call_us(fn, args, number: int) -> float:
    best = min(timeit.repeat(lambda: fn(*args), number=number, repeat=5))
    return best / number * 1e6


def use(backend) -> None:
    for name in KERNELS:
        setattr(kernels, name, getattr(backend, name))


def replay_seconds() -> float:
    workload = generate_workload(WorkloadConfig())
    dep = build_deployment(Strategy.REUSE_ADAPTIVE, workload, DeploymentParams(record_timings=False))
    started = time.perf_counter()
    replay(dep, workload)
    return time.perf_counter() - started


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--number", type=int, default=2000, help="calls per timing loop")
    p.add_argument("--replay", action="store_true", help="also time a full replay per backend")
    args = p.parse_args(argv)

    names = sorted(kernels.BACKENDS)
    print(f"default backend: {kernels.BACKEND}")
    print(f"{'kernel':<24}" + "".join(f"{n + ' us':>14}" for n in names) + f"{'speedup':>10}")
    for label, (kernel, call_args) in cases(np.random.default_rng(0)).items():
        times = {n: per_call_us(getattr(kernels.BACKENDS[n], kernel), call_args, args.number) for n in names}
        speedup = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{label:<24}" + "".join(f"{times[n]:>14.3f}" for n in names) + f"{speedup:>9.1f}x")

    if args.replay:
        original = {name: getattr(kernels, name) for name in KERNELS}
        try:
            for n in names:
                use(kernels.BACKENDS[n])
                print(f"replay 10k tasks on {n}: {replay_seconds():.2f}s")
        finally:
            for name, fn in original.items():
                setattr(kernels, name, fn)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
