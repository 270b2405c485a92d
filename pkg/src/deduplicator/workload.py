"""Synthetic correlated task streams.

Tasks are noisy copies of a set of unit-norm cluster centroids. Cluster
popularity follows a Zipf law, and the noise level is solved for so that the
mean cosine similarity between a task and its centroid hits a target.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from deduplicator.errors import ConfigurationError

_SIGMA_SAMPLES = 200_000
# keeps the workload stream independent of a hasher built from the same seed
_STREAM_TAG = 0x776B6C64


@dataclass(frozen=True)
class WorkloadConfig:
    dim: int = 16
    clusters: int = 50
    intra_similarity: float = 0.95
    zipf_s: float = 1.1
    tasks: int = 10_000
    services: tuple[str, ...] = ("detect",)
    threshold: float = 0.9
    seed: int = 0
    clients: int = 100
    orthogonal_clusters: bool = False
    pad_bytes: int = 0

    def validate(self) -> None:
        if self.dim < 2:
            raise ConfigurationError("dim must be >= 2")
        if self.clusters < 1:
            raise ConfigurationError("need at least one cluster")
        if not 0.0 < self.intra_similarity < 1.0:
            raise ConfigurationError(f"intra_similarity must lie in (0, 1), got {self.intra_similarity}")
        if self.zipf_s < 0:
            raise ConfigurationError("zipf_s must be >= 0")
        if self.tasks < 0:
            raise ConfigurationError("tasks must be >= 0")
        if not self.services:
            raise ConfigurationError("need at least one service")
        if not 0.0 <= self.threshold <= 1.0:
            raise ConfigurationError("threshold must lie in [0, 1]")
        if self.clients < 1:
            raise ConfigurationError("need at least one client")
        if self.orthogonal_clusters and self.clusters > self.dim:
            raise ConfigurationError(f"cannot place {self.clusters} orthogonal clusters in {self.dim} dimensions")


@dataclass
class Workload:
    config: WorkloadConfig
    centroids: np.ndarray  # (clusters, dim), unit rows
    cluster_of: np.ndarray  # (tasks,)
    payloads: np.ndarray  # (tasks, dim)
    service_of: np.ndarray  # (tasks,) index into config.services
    client_of: np.ndarray  # (tasks,)
    sigma: float = 0.0
    task_ids: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.payloads.shape[0]

    def service(self, i: int) -> str:
        return self.config.services[int(self.service_of[i])]

    def client(self, i: int) -> str:
        return f"client-{int(self.client_of[i])}"


def _expected_cos(sigma: float, z: np.ndarray, chi2: np.ndarray) -> float:
    along = 1.0 + sigma * z
    return float(np.mean(along / np.sqrt(along * along + sigma * sigma * chi2)))


@lru_cache(maxsize=64)
def noise_scale(dim: int, target: float) -> float:
    """Per-coordinate Gaussian noise giving mean cosine ``target`` to the clean vector."""
    if not 0.0 < target < 1.0:
        raise ConfigurationError(f"target similarity must lie in (0, 1), got {target}")
    rng = np.random.default_rng(0x5EED)
    z = rng.standard_normal(_SIGMA_SAMPLES)
    chi2 = rng.chisquare(dim - 1, _SIGMA_SAMPLES)
    lo, hi = 0.0, 1.0
    while _expected_cos(hi, z, chi2) > target:
        hi *= 2.0
        if hi > 1e6:
            raise ConfigurationError(f"cannot reach similarity {target} in {dim} dimensions")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if _expected_cos(mid, z, chi2) > target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def zipf_weights(n: int, s: float) -> np.ndarray:
    ranks = np.arange(1, n + 1, dtype=np.float64)
    w = ranks ** (-s)
    return w / w.sum()


def make_centroids(rng: np.random.Generator, clusters: int, dim: int, orthogonal: bool) -> np.ndarray:
    if orthogonal:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        return np.ascontiguousarray(q.T[:clusters])
    c = rng.standard_normal((clusters, dim))
    return np.ascontiguousarray(c / np.linalg.norm(c, axis=1, keepdims=True))


def generate_workload(cfg: WorkloadConfig) -> Workload:
    cfg.validate()
    rng = np.random.default_rng([cfg.seed, _STREAM_TAG])
    centroids = make_centroids(rng, cfg.clusters, cfg.dim, cfg.orthogonal_clusters)
    sigma = noise_scale(cfg.dim, cfg.intra_similarity)
    cluster_of = rng.choice(cfg.clusters, size=cfg.tasks, p=zipf_weights(cfg.clusters, cfg.zipf_s))
    noisy = centroids[cluster_of] + sigma * rng.standard_normal((cfg.tasks, cfg.dim))
    payloads = np.ascontiguousarray(noisy / np.linalg.norm(noisy, axis=1, keepdims=True))
    service_of = rng.integers(0, len(cfg.services), size=cfg.tasks)
    client_of = np.arange(cfg.tasks) % cfg.clients
    return Workload(
        config=cfg,
        centroids=centroids,
        cluster_of=cluster_of,
        payloads=payloads,
        service_of=service_of,
        client_of=client_of,
        sigma=sigma,
        task_ids=[f"t{cfg.seed}-{i}" for i in range(cfg.tasks)],
    )
