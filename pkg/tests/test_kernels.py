import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from deduplicator import kernels


def unit_rows(rng, n, d):
    m = rng.standard_normal((n, d))
    return np.ascontiguousarray(m / np.linalg.norm(m, axis=1, keepdims=True))


def test_backend_selected_at_import():
    assert kernels.BACKEND in kernels.BACKENDS
    assert "python" in kernels.BACKENDS


def test_signature_matches_oracle(backend, rng):
    for bits, dim in [(1, 2), (8, 3), (16, 16), (32, 7)]:
        planes = rng.standard_normal((bits, dim))
        for _ in range(50):
            v = rng.standard_normal(dim)
            assert backend.signature(planes, v) == oracles.signature(planes, v)


def test_signature_zero_dot_sets_bit(backend):
    planes = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    # dot products 0, 1, 0: ties map to 1
    assert backend.signature(planes, np.array([0.0, 1.0])) == 0b111


def test_signature_msb_is_first_plane(backend):
    planes = np.array([[1.0, 0.0], [-1.0, 0.0]])
    assert backend.signature(planes, np.array([1.0, 0.0])) == 0b10


def test_signature_rejects_dimension_mismatch(backend):
    with pytest.raises(ValueError):
        backend.signature(np.ones((4, 3)), np.ones(2))


def test_nearest_matches_oracle(backend, rng):
    rows = unit_rows(rng, 40, 8)
    for _ in range(30):
        q = unit_rows(rng, 1, 8)[0]
        idx, score = backend.nearest(rows, 40, q)
        o_idx, o_score = oracles.nearest(rows, q)
        assert idx == o_idx
        assert score == pytest.approx(o_score, abs=1e-12)


def test_nearest_respects_count(backend, rng):
    rows = unit_rows(rng, 10, 4)
    q = rows[7].copy()
    idx, _ = backend.nearest(rows, 5, q)
    assert idx < 5


def test_nearest_empty(backend):
    idx, score = backend.nearest(np.empty((0, 3)), 0, np.ones(3))
    assert idx == -1 and score == float("-inf")


def test_nearest_ties_prefer_later_rows(backend):
    rows = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
    assert backend.nearest(rows, 3, np.array([1.0, 0.0]))[0] == 2


def test_argmax_ties_prefer_lower_index(backend):
    rows = np.array([[0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    assert backend.argmax_rows(rows, np.array([1.0, 0.0])) == 1


def test_argmax_matches_oracle(backend, rng):
    rows = unit_rows(rng, 30, 5)
    for _ in range(30):
        q = rng.standard_normal(5)
        assert backend.argmax_rows(rows, q) == oracles.argmax(rows, q)


def test_find_slice(backend):
    starts = np.array([0, 4, 10, 11], dtype=np.uint64)
    expect = [0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 2, 3, 3, 3]
    assert [backend.find_slice(starts, b) for b in range(14)] == expect


@settings(max_examples=200, deadline=None)
@given(
    cuts=st.sets(st.integers(1, 2**16 - 1), max_size=40),
    bucket=st.integers(0, 2**16 - 1),
)
def test_find_slice_agrees_across_backends(cuts, bucket):
    starts = np.array(sorted({0} | cuts), dtype=np.uint64)
    expect = max(i for i, s in enumerate(starts) if s <= bucket)
    for impl in kernels.BACKENDS.values():
        assert impl.find_slice(starts, bucket) == expect


@settings(max_examples=100, deadline=None)
@given(
    vec=arrays(np.float64, 6, elements=st.floats(-1e3, 1e3, allow_nan=False)),
    seed=st.integers(0, 2**32 - 1),
)
def test_backends_agree_on_signatures(vec, seed):
    planes = np.random.default_rng(seed).standard_normal((12, 6))
    values = {name: impl.signature(planes, vec) for name, impl in kernels.BACKENDS.items()}
    assert len(set(values.values())) == 1
