import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from deduplicator.errors import ConfigurationError, InputError
from deduplicator.lsh import (
    LshConfig,
    as_feature_vector,
    build_hasher,
    cosine_similarity,
    hash_vector,
    signature_from_hex,
    signature_to_hex,
)


def test_same_config_same_planes():
    a = build_hasher(LshConfig(16, 8, 7))
    b = build_hasher(LshConfig(16, 8, 7))
    assert np.array_equal(a.planes, b.planes)
    assert a.planes.shape == (16, 8)


def test_different_seed_different_planes():
    a = build_hasher(LshConfig(16, 8, 7))
    b = build_hasher(LshConfig(16, 8, 8))
    assert not np.array_equal(a.planes, b.planes)


def test_planes_are_seeded_standard_normal():
    h = build_hasher(LshConfig(4, 3, 11))
    assert np.array_equal(h.planes, np.random.default_rng(11).standard_normal((4, 3)))


@pytest.mark.parametrize("bits,dim", [(0, 8), (33, 8), (16, 1), (-1, 4)])
def test_invalid_config(bits, dim):
    with pytest.raises(ConfigurationError):
        build_hasher(LshConfig(bits, dim, 0))


def test_planes_are_read_only():
    h = build_hasher(LshConfig())
    with pytest.raises(ValueError):
        h.planes[0, 0] = 1.0


def test_hash_matches_oracle(use_backend, rng):
    h = build_hasher(LshConfig(16, 16, 3))
    for _ in range(100):
        v = rng.standard_normal(16)
        assert hash_vector(h, v) == oracles.signature(h.planes, v)


def test_hash_accepts_lists(use_backend):
    h = build_hasher(LshConfig(8, 3, 0))
    assert hash_vector(h, [0.5, -1.0, 2.0]) == hash_vector(h, np.array([0.5, -1.0, 2.0]))


def test_hash_dimension_mismatch(use_backend):
    h = build_hasher(LshConfig(8, 4, 0))
    with pytest.raises(InputError):
        hash_vector(h, np.ones(5))


@settings(max_examples=200, deadline=None)
@given(
    values=st.lists(st.floats(-100, 100, allow_nan=False).filter(lambda x: abs(x) > 1e-6), min_size=8, max_size=8),
    bits=st.integers(1, 32),
)
def test_negation_complements_signature(values, bits):
    h = build_hasher(LshConfig(bits, 8, 5))
    v = np.array(values)
    if np.any(np.abs(h.planes @ v) < 1e-9):
        return  # a tie makes both sides 1
    sig = hash_vector(h, v)
    assert 0 <= sig < 2**bits
    assert hash_vector(h, -v) == sig ^ (2**bits - 1)


def test_cosine_examples():
    v = np.array([0.3, -2.0, 1.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0)
    assert cosine_similarity(v, -v) == pytest.approx(-1.0)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0


def test_cosine_zero_vector():
    with pytest.raises(InputError):
        cosine_similarity([0, 0], [1, 0])


def test_cosine_dimension_mismatch():
    with pytest.raises(InputError):
        cosine_similarity([1, 0], [1, 0, 0])


@settings(max_examples=100, deadline=None)
@given(
    a=st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
    b=st.lists(st.floats(-1e3, 1e3), min_size=4, max_size=4),
)
def test_cosine_bounded_and_matches_oracle(a, b):
    if math.hypot(*a) < 1e-3 or math.hypot(*b) < 1e-3:
        return
    c = cosine_similarity(a, b)
    assert -1.0 <= c <= 1.0
    assert c == pytest.approx(max(-1.0, min(1.0, oracles.cosine(a, b))), abs=1e-9)


@pytest.mark.parametrize("bad", [[1.0], [[1.0, 2.0]], [1.0, float("nan")], [1.0, float("inf")], ["a", "b"]])
def test_feature_vector_validation(bad):
    with pytest.raises(InputError):
        as_feature_vector(bad)


def test_feature_vector_dimension():
    with pytest.raises(InputError):
        as_feature_vector([1.0, 2.0, 3.0], dim=2)


@pytest.mark.parametrize("value,bits,text", [(0, 16, "0000"), (0xBEEF, 16, "beef"), (5, 3, "5"), (1, 5, "01"), (2**32 - 1, 32, "ffffffff")])
def test_hex_wire_form(value, bits, text):
    assert signature_to_hex(value, bits) == text
    assert signature_from_hex(text, bits) == value


@settings(max_examples=200, deadline=None)
@given(bits=st.integers(1, 32), data=st.data())
def test_hex_round_trip(bits, data):
    value = data.draw(st.integers(0, 2**bits - 1))
    text = signature_to_hex(value, bits)
    assert len(text) == math.ceil(bits / 4)
    assert text == text.lower()
    assert signature_from_hex(text, bits) == value


@pytest.mark.parametrize("text", ["zz", "", "10000"])
def test_hex_rejects(text):
    with pytest.raises(InputError):
        signature_from_hex(text, 16)


def test_hex_rejects_out_of_range_value():
    with pytest.raises(InputError):
        signature_to_hex(16, 4)


def _pairs_at_angle(rng, theta, n, d):
    u = rng.standard_normal((n, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    w = rng.standard_normal((n, d))
    w -= (w * u).sum(axis=1, keepdims=True) * u
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    return u, math.cos(theta) * u + math.sin(theta) * w


def bit_agreement(theta, pairs=10_000, bits=16, dim=16, seed=0) -> float:
    h = build_hasher(LshConfig(bits, dim, seed))
    u, v = _pairs_at_angle(np.random.default_rng(seed + 1), theta, pairs, dim)
    agree = 0
    for a, b in zip(u, v):
        agree += bits - bin(hash_vector(h, a) ^ hash_vector(h, b)).count("1")
    return agree / (pairs * bits)


@pytest.mark.parametrize("theta", [math.pi / 8, math.pi / 4, math.pi / 2])
def test_collision_law(theta):
    assert bit_agreement(theta, pairs=2000) == pytest.approx(1 - theta / math.pi, abs=0.03)
