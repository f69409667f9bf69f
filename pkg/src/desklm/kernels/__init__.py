"""Numeric kernels with a compiled core and a pure-numpy fallback.

The compiled extension (``desklm.kernels._ckernels``, built from Cython) is
used when importable; otherwise the numpy implementations take over.  Both
backends follow one contract: float32 storage, float64 accumulation, so they
agree to float32 resolution and either can back the whole runtime.

Selection:
  * env var ``DESKLM_KERNELS`` = ``auto`` (default) | ``compiled`` | ``numpy``
  * :func:`use_backend` switches at runtime (used by the benchmark).
"""

import os

import numpy as np

from . import numpy_backend

_BACKENDS = {"numpy": numpy_backend}

try:
    from . import _ckernels

    _BACKENDS["compiled"] = _ckernels
except ImportError:  # extension not built; numpy fallback only
    _ckernels = None


def available_backends():
    return sorted(_BACKENDS)


def use_backend(name):
    """Switch the active backend; returns the previously active name."""
    global _active, _active_name
    if name == "auto":
        name = "compiled" if "compiled" in _BACKENDS else "numpy"
    if name not in _BACKENDS:
        raise ValueError(f"unknown kernel backend {name!r}; have {available_backends()}")
    prev = _active_name
    _active_name = name
    _active = _BACKENDS[name]
    return prev


def backend_name():
    return _active_name


def get_backend(name):
    return _BACKENDS[name]


_active_name = None
_active = None
_requested = os.environ.get("DESKLM_KERNELS", "auto")
use_backend(_requested if _requested in ("numpy", "compiled") else "auto")


def _f32(a):
    return np.ascontiguousarray(a, dtype=np.float32)


def _2d(a):
    a = _f32(a)
    return a.reshape(1, -1) if a.ndim == 1 else a


def matmul(a, b):
    return _active.matmul(_f32(a), _f32(b))


def rmsnorm(x, gain, eps):
    return _active.rmsnorm(_2d(x), _f32(gain).ravel(), float(eps))


def rope_rotate(x, positions, head_dim, theta):
    pos = np.ascontiguousarray(positions, dtype=np.int64)
    return _active.rope_rotate(_2d(x), pos, int(head_dim), float(theta))


def softmax(x):
    x = _f32(x)
    if x.ndim == 2:
        return _active.softmax(x)
    flat = x.reshape(-1, x.shape[-1])
    return _active.softmax(flat).reshape(x.shape)


def silu(x):
    x = _f32(x)
    return _active.silu(x.reshape(-1, x.shape[-1])).reshape(x.shape)


def masked_attention(q, k, v, mask, scale, k_transposed=False):
    return _active.masked_attention(
        _f32(q), _f32(k), _f32(v), _f32(mask), float(scale), bool(k_transposed)
    )


def quantize_codes(x, scales, qmin, qmax):
    """Symmetric round-half-away-from-zero quantization to int codes.

    ``scales`` must broadcast against ``x``; the broadcast happens here so
    both backends see flat element-wise inputs.
    """
    x = np.asarray(x, dtype=np.float32)
    s = np.broadcast_to(np.asarray(scales, dtype=np.float64), x.shape)
    flat = _active.quantize_codes(
        np.ascontiguousarray(x.ravel()), np.ascontiguousarray(s.ravel()),
        int(qmin), int(qmax),
    )
    return flat.reshape(x.shape)


def dequantize_codes(codes, scales):
    codes = np.asarray(codes, dtype=np.int8)
    s = np.broadcast_to(np.asarray(scales, dtype=np.float64), codes.shape)
    flat = _active.dequantize_codes(
        np.ascontiguousarray(codes.ravel()), np.ascontiguousarray(s.ravel())
    )
    return flat.reshape(codes.shape)


def pack_int4(codes):
    return _active.pack_int4(np.ascontiguousarray(codes, dtype=np.int8).ravel())


def unpack_int4(packed, count):
    return _active.unpack_int4(
        np.ascontiguousarray(packed, dtype=np.uint8), int(count)
    )
