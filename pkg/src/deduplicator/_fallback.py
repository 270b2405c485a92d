"""numpy implementations of the compiled kernels, used when the extension is absent."""

from __future__ import annotations

import numpy as np


def signature(planes: np.ndarray, vector: np.ndarray) -> int:
    if vector.shape[0] != planes.shape[1]:
        raise ValueError("dimension mismatch")
    value = 0
    for bit in (planes @ vector) >= 0.0:
        value = (value << 1) | int(bit)
    return value


def nearest(matrix: np.ndarray, count: int, query: np.ndarray) -> tuple[int, float]:
    if query.shape[0] != matrix.shape[1]:
        raise ValueError("dimension mismatch")
    count = min(count, matrix.shape[0])
    if count <= 0:
        return -1, float("-inf")
    scores = matrix[:count] @ query
    # last occurrence of the maximum
    best = count - 1 - int(np.argmax(scores[::-1]))
    return best, float(scores[best])


def argmax_rows(matrix: np.ndarray, query: np.ndarray) -> int:
    if query.shape[0] != matrix.shape[1]:
        raise ValueError("dimension mismatch")
    if matrix.shape[0] == 0:
        return -1
    return int(np.argmax(matrix @ query))


def find_slice(starts: np.ndarray, bucket: int) -> int:
    return int(np.searchsorted(starts, bucket, side="right")) - 1
