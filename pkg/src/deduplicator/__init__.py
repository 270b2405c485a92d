"""Reuse-aware load balancing for edge computing.

Tasks are hashed with sign-random-projection LSH and routed by slices of the
hash space, so similar tasks land on the server that already holds a
reusable result.
"""

from deduplicator.kernels import BACKEND
from deduplicator.lsh import LshConfig, build_hasher, cosine_similarity, hash_vector
from deduplicator.proxy import Deduplicator, ProxyConfig
from deduplicator.slices import (
    LoadSample,
    MigrationDirective,
    Slice,
    SliceTable,
    adaptive_redistribute,
    add_server,
    initial_equal,
    merge_adjacent,
    remove_server,
    shrink_edges,
    split_fine,
)
from deduplicator.strategies import Strategy

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "Deduplicator",
    "LoadSample",
    "LshConfig",
    "MigrationDirective",
    "ProxyConfig",
    "Slice",
    "SliceTable",
    "Strategy",
    "adaptive_redistribute",
    "add_server",
    "build_hasher",
    "cosine_similarity",
    "hash_vector",
    "initial_equal",
    "merge_adjacent",
    "remove_server",
    "shrink_edges",
    "split_fine",
]
