"""Sign-random-projection hashing into a linear b-bit bucket space.

Each of the ``b`` hyperplane normals contributes one bit: 1 when the vector
lies on the non-negative side. Plane 0 is the most significant bit, so the
integer ordering of signatures is fixed across implementations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from deduplicator import kernels
from deduplicator.errors import ConfigurationError, InputError

DEFAULT_BITS = 16
MAX_BITS = 32


@dataclass(frozen=True)
class LshConfig:
    bits: int = DEFAULT_BITS
    dim: int = 16
    seed: int = 0

    def validate(self) -> None:
        if not isinstance(self.bits, int) or not 1 <= self.bits <= MAX_BITS:
            raise ConfigurationError(f"bits must be in [1, {MAX_BITS}], got {self.bits!r}")
        if not isinstance(self.dim, int) or self.dim < 2:
            raise ConfigurationError(f"dim must be >= 2, got {self.dim!r}")
        if not -(2**63) <= self.seed < 2**64:
            raise ConfigurationError("seed must fit in 64 bits")

    @property
    def space(self) -> int:
        return 1 << self.bits


@dataclass(frozen=True)
class Hasher:
    """Immutable hyperplane hasher; safe to share between threads."""

    config: LshConfig
    planes: np.ndarray = field(repr=False)

    def __call__(self, vector) -> int:
        return hash_vector(self, vector)


def build_hasher(config: LshConfig) -> Hasher:
    config.validate()
    rng = np.random.default_rng(config.seed % 2**64)
    planes = np.ascontiguousarray(rng.standard_normal((config.bits, config.dim)))
    planes.setflags(write=False)
    return Hasher(config, planes)


def as_feature_vector(values: Sequence[float] | np.ndarray, dim: int | None = None) -> np.ndarray:
    """Validate and convert to a contiguous float64 array."""
    try:
        arr = np.ascontiguousarray(values, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InputError(f"feature vector is not numeric: {exc}") from None
    if arr.ndim != 1:
        raise InputError("feature vector must be one-dimensional")
    if dim is not None and arr.shape[0] != dim:
        raise InputError(f"expected dimension {dim}, got {arr.shape[0]}")
    if arr.shape[0] < 2:
        raise InputError("feature vector needs at least 2 components")
    if not np.all(np.isfinite(arr)):
        raise InputError("feature vector has non-finite values")
    return arr


def hash_vector(hasher: Hasher, vector) -> int:
    """Signature of ``vector`` as an integer in ``[0, 2**bits)``."""
    if not (isinstance(vector, np.ndarray) and vector.dtype == np.float64 and vector.flags.c_contiguous):
        vector = as_feature_vector(vector)
    if vector.shape[0] != hasher.config.dim:
        raise InputError(f"expected dimension {hasher.config.dim}, got {vector.shape[0]}")
    return int(kernels.signature(hasher.planes, vector))


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InputError("vectors differ in dimension")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise InputError("cosine similarity is undefined for a zero vector")
    return max(-1.0, min(1.0, float(a @ b) / (na * nb)))


def signature_to_hex(value: int, bits: int) -> str:
    if not 0 <= value < (1 << bits):
        raise InputError(f"signature {value} outside a {bits}-bit space")
    return format(value, f"0{math.ceil(bits / 4)}x")


def signature_from_hex(text: str, bits: int) -> int:
    try:
        value = int(text.strip(), 16)
    except (AttributeError, ValueError):
        raise InputError(f"malformed signature {text!r}") from None
    if not 0 <= value < (1 << bits):
        raise InputError(f"signature {text!r} outside a {bits}-bit space")
    return value
