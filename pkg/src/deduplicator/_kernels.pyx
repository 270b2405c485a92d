# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.

Every function here has a numpy twin in :mod:`deduplicator._fallback` with the
same signature and the same tie rules; :mod:`deduplicator.kernels` picks one at
import time.
"""

from libc.math cimport INFINITY

ctypedef unsigned long long u64


def signature(const double[:, ::1] planes, const double[::1] vector):
    """Pack sign bits of ``planes @ vector``, plane 0 in the most significant bit.

    A zero projection counts as a 1 bit.
    """
    cdef Py_ssize_t bits = planes.shape[0]
    cdef Py_ssize_t dim = planes.shape[1]
    cdef Py_ssize_t i, j
    cdef double acc
    cdef u64 value = 0
    if vector.shape[0] != dim:
        raise ValueError("dimension mismatch")
    for i in range(bits):
        acc = 0.0
        for j in range(dim):
            acc += planes[i, j] * vector[j]
        value = (value << 1) | (1 if acc >= 0.0 else 0)
    return value


def nearest(const double[:, ::1] matrix, Py_ssize_t count, const double[::1] query):
    """Row of ``matrix[:count]`` with the largest dot product against ``query``.

    Later rows win ties. Returns ``(-1, -inf)`` when ``count`` is 0.
    """
    cdef Py_ssize_t dim = matrix.shape[1]
    cdef Py_ssize_t i, j
    cdef Py_ssize_t best = -1
    cdef double best_score = -INFINITY
    cdef double acc
    if query.shape[0] != dim:
        raise ValueError("dimension mismatch")
    if count > matrix.shape[0]:
        count = matrix.shape[0]
    for i in range(count):
        acc = 0.0
        for j in range(dim):
            acc += matrix[i, j] * query[j]
        if acc >= best_score:
            best_score = acc
            best = i
    return best, best_score


def argmax_rows(const double[:, ::1] matrix, const double[::1] query):
    """Row index maximising the dot product with ``query``; lowest index wins ties."""
    cdef Py_ssize_t rows = matrix.shape[0]
    cdef Py_ssize_t dim = matrix.shape[1]
    cdef Py_ssize_t i, j
    cdef Py_ssize_t best = -1
    cdef double best_score = -INFINITY
    cdef double acc
    if query.shape[0] != dim:
        raise ValueError("dimension mismatch")
    for i in range(rows):
        acc = 0.0
        for j in range(dim):
            acc += matrix[i, j] * query[j]
        if acc > best_score:
            best_score = acc
            best = i
    return best


def find_slice(const u64[::1] starts, u64 bucket):
    """Index of the last entry of sorted ``starts`` that is <= ``bucket``."""
    cdef Py_ssize_t lo = 0
    cdef Py_ssize_t hi = starts.shape[0]
    cdef Py_ssize_t mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if starts[mid] <= bucket:
            lo = mid + 1
        else:
            hi = mid
    return lo - 1
