"""Pure-numpy kernel implementations.

These are the fallback for the compiled extension and the reference its
results are checked against.  Every kernel takes float32 arrays and returns
float32, but accumulates in float64 internally.  That keeps results
essentially independent of summation order, which is what makes
incremental decoding bit-comparable to full-sequence recompute and lets the
two backends agree to float32 resolution.
"""

import numpy as np


def matmul(a, b):
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def rmsnorm(x, gain, eps):
    x64 = x.astype(np.float64)
    inv = 1.0 / np.sqrt(np.mean(x64 * x64, axis=-1, keepdims=True) + eps)
    return (x64 * inv * gain.astype(np.float64)).astype(np.float32)


def rope_rotate(x, positions, head_dim, theta):
    n, width = x.shape
    half = head_dim // 2
    inv_freq = float(theta) ** (-2.0 * np.arange(half, dtype=np.float64) / head_dim)
    ang = positions.astype(np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(ang)[:, None, :]
    sin = np.sin(ang)[:, None, :]
    x64 = x.astype(np.float64).reshape(n, width // head_dim, half, 2)
    out = np.empty_like(x64)
    out[..., 0] = x64[..., 0] * cos - x64[..., 1] * sin
    out[..., 1] = x64[..., 0] * sin + x64[..., 1] * cos
    return out.reshape(n, width).astype(np.float32)


def softmax(x):
    x64 = x.astype(np.float64)
    x64 = x64 - x64.max(axis=-1, keepdims=True)
    e = np.exp(x64)
    return (e / e.sum(axis=-1, keepdims=True)).astype(np.float32)


def silu(x):
    x64 = x.astype(np.float64)
    return (x64 / (1.0 + np.exp(-x64))).astype(np.float32)


def masked_attention(q, k, v, mask, scale, k_transposed=False):
    q64 = q.astype(np.float64)
    k64 = k.astype(np.float64)
    scores = (q64 @ k64) if k_transposed else (q64 @ k64.T)
    scores = scores * scale + mask.astype(np.float64)
    scores -= scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return (w @ v.astype(np.float64)).astype(np.float32)


def quantize_codes(x, scales, qmin, qmax):
    y = x.astype(np.float64) / scales
    r = np.sign(y) * np.floor(np.abs(y) + 0.5)  # round half away from zero
    return np.clip(r, qmin, qmax).astype(np.int8)


def dequantize_codes(codes, scales):
    return (codes.astype(np.float64) * scales).astype(np.float32)


def pack_int4(codes):
    flat = codes.astype(np.int8).ravel()
    if flat.size % 2:
        flat = np.concatenate([flat, np.zeros(1, dtype=np.int8)])
    nib = (flat.astype(np.uint8)) & 0xF
    return (nib[0::2] | (nib[1::2] << 4)).astype(np.uint8)


def unpack_int4(packed, count):
    u = np.asarray(packed, dtype=np.uint8)
    out = np.empty(u.size * 2, dtype=np.int8)
    out[0::2] = (u & 0xF).astype(np.int8)
    out[1::2] = (u >> 4).astype(np.int8)
    return (((out ^ 8) - 8).astype(np.int8))[:count]
