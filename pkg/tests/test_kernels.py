import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from desklm import kernels


def test_matmul_matches_float64_reference(rng):
    a = rng.normal(size=(7, 11)).astype(np.float32)
    b = rng.normal(size=(11, 5)).astype(np.float32)
    ref = (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)
    assert np.allclose(kernels.matmul(a, b), ref, atol=1e-6)


def test_rmsnorm_hand_value():
    out = kernels.rmsnorm(np.array([[3.0, 4.0]], np.float32),
                          np.ones(2, np.float32), 0.0)
    assert np.allclose(out, [[3 / math.sqrt(12.5), 4 / math.sqrt(12.5)]], atol=1e-6)
    assert np.allclose(out, [[0.8485, 1.1314]], atol=1e-4)


def test_rope_position_zero_is_identity(rng):
    x = rng.normal(size=(3, 8)).astype(np.float32)
    out = kernels.rope_rotate(x, np.zeros(3, np.int64), 8, 10000.0)
    assert np.array_equal(out, x)


def test_rope_closed_form_pair():
    out = kernels.rope_rotate(np.array([[1.0, 0.0]], np.float32),
                              np.array([1]), 2, 10000.0)
    assert np.allclose(out, [[math.cos(1.0), math.sin(1.0)]], atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 500), st.integers(0, 2**31))
def test_rope_is_an_isometry(pos, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 16)).astype(np.float32)
    out = kernels.rope_rotate(x, np.full(2, pos, np.int64), 8, 10000.0)
    assert np.allclose(np.linalg.norm(out, axis=1),
                       np.linalg.norm(x, axis=1), rtol=1e-5)


def test_masked_attention_single_position_returns_v(rng):
    q = rng.normal(size=(1, 4)).astype(np.float32)
    k = rng.normal(size=(1, 4)).astype(np.float32)
    v = rng.normal(size=(1, 4)).astype(np.float32)
    out = kernels.masked_attention(q, k, v, np.zeros((1, 1), np.float32), 0.5)
    assert np.allclose(out, v, atol=1e-6)


def test_masked_attention_uniform_over_identical_keys(rng):
    q = rng.normal(size=(1, 4)).astype(np.float32)
    k = np.tile(rng.normal(size=(1, 4)).astype(np.float32), (5, 1))
    v = rng.normal(size=(5, 4)).astype(np.float32)
    out = kernels.masked_attention(q, k, v, np.zeros((1, 5), np.float32), 0.5)
    assert np.allclose(out, v.mean(axis=0), atol=1e-6)


def _attention_oracle(q, k, v, mask, scale):
    s = q.astype(np.float64) @ k.astype(np.float64).T * scale + mask
    w = np.exp(s - s.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    return (w @ v.astype(np.float64)).astype(np.float32)


def test_masked_attention_against_bruteforce(rng):
    q = rng.normal(size=(4, 8)).astype(np.float32)
    k = rng.normal(size=(9, 8)).astype(np.float32)
    v = rng.normal(size=(9, 8)).astype(np.float32)
    mask = np.where(rng.random((4, 9)) < 0.4, -1e9, 0.0).astype(np.float32)
    mask[:, 0] = 0.0  # keep every row visible somewhere
    out = kernels.masked_attention(q, k, v, mask, 1 / math.sqrt(8))
    assert np.allclose(out, _attention_oracle(q, k, v, mask, 1 / math.sqrt(8)),
                       atol=1e-6)


def test_masked_attention_transposed_layout_agrees(rng):
    q = rng.normal(size=(3, 4)).astype(np.float32)
    k = rng.normal(size=(6, 4)).astype(np.float32)
    v = rng.normal(size=(6, 4)).astype(np.float32)
    mask = np.zeros((3, 6), np.float32)
    plain = kernels.masked_attention(q, k, v, mask, 0.5)
    kt = kernels.masked_attention(q, np.ascontiguousarray(k.T), v, mask, 0.5,
                                  k_transposed=True)
    assert np.max(np.abs(plain - kt)) <= 1e-6


def test_quantize_rounds_half_away_from_zero():
    x = np.array([2.5, -2.5, 0.5, -0.5, 1.4], np.float32)
    codes = kernels.quantize_codes(x, 1.0, -8, 7)
    assert codes.tolist() == [3, -3, 1, -1, 1]


def test_quantize_clamps_to_range():
    codes = kernels.quantize_codes(np.array([100.0, -100.0], np.float32), 1.0, -8, 7)
    assert codes.tolist() == [7, -8]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**31))
def test_int4_pack_roundtrip(count, seed):
    rng = np.random.default_rng(seed)
    codes = rng.integers(-8, 8, size=count).astype(np.int8)
    assert np.array_equal(kernels.unpack_int4(kernels.pack_int4(codes), count), codes)


def test_int4_packing_is_low_nibble_first():
    packed = kernels.pack_int4(np.array([1, -1], np.int8))
    assert packed.tolist() == [0xF1]


@pytest.mark.skipif("compiled" not in kernels.available_backends(),
                    reason="compiled extension not built")
def test_backends_agree(rng):
    q = rng.normal(size=(5, 8)).astype(np.float32)
    k = rng.normal(size=(12, 8)).astype(np.float32)
    v = rng.normal(size=(12, 8)).astype(np.float32)
    mask = np.where(rng.random((5, 12)) < 0.3, -1e9, 0.0).astype(np.float32)
    mask[:, 0] = 0.0
    x = rng.normal(size=(5, 16)).astype(np.float32)
    w = rng.normal(size=(16, 9)).astype(np.float32)
    gain = rng.normal(size=16).astype(np.float32)
    pos = np.arange(5, dtype=np.int64)
    calls = [
        lambda: kernels.matmul(x, w),
        lambda: kernels.rmsnorm(x, gain, 1e-5),
        lambda: kernels.rope_rotate(x, pos, 8, 10000.0),
        lambda: kernels.softmax(mask + 1.0),
        lambda: kernels.silu(x),
        lambda: kernels.masked_attention(q, k, v, mask, 0.35),
        lambda: kernels.quantize_codes(x, 0.01, -128, 127),
    ]
    prev = kernels.backend_name()
    try:
        results = {}
        for backend in ("numpy", "compiled"):
            kernels.use_backend(backend)
            results[backend] = [fn() for fn in calls]
    finally:
        kernels.use_backend(prev)
    for a, b in zip(results["numpy"], results["compiled"]):
        assert np.max(np.abs(a.astype(np.float64) - b.astype(np.float64))) <= 1e-6


def test_use_backend_rejects_unknown():
    with pytest.raises(ValueError):
        kernels.use_backend("cuda")
