# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled decode kernels.

Same contract as numpy_backend: float32 in/out, float64 accumulation,
sequential reductions.  The win over numpy at decode-time shapes
(rows up to ~32, dims 16..256) comes from fusing the attention chain into
one pass and skipping per-op dispatch/temporaries.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, exp, fabs, floor, sin, sqrt

cnp.import_array()


def matmul(const cnp.float32_t[:, ::1] a, const cnp.float32_t[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0], k = a.shape[1], n = b.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] out = np.zeros((m, n), dtype=np.float32)
    cdef double[::1] acc = np.zeros(n, dtype=np.float64)
    cdef cnp.float32_t[:, ::1] o = out
    cdef Py_ssize_t i, j, p
    cdef double av
    with nogil:
        for i in range(m):
            for j in range(n):
                acc[j] = 0.0
            for p in range(k):
                av = a[i, p]
                for j in range(n):
                    acc[j] += av * b[p, j]
            for j in range(n):
                o[i, j] = <cnp.float32_t> acc[j]
    return out


def rmsnorm(const cnp.float32_t[:, ::1] x, const cnp.float32_t[::1] gain, double eps):
    cdef Py_ssize_t n = x.shape[0], e = x.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] out = np.empty((n, e), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double s, inv
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(e):
                s += (<double> x[i, j]) * (<double> x[i, j])
            inv = 1.0 / sqrt(s / e + eps)
            for j in range(e):
                o[i, j] = <cnp.float32_t> ((<double> x[i, j]) * inv * (<double> gain[j]))
    return out


def rope_rotate(const cnp.float32_t[:, ::1] x, const cnp.int64_t[::1] positions,
                Py_ssize_t head_dim, double theta):
    cdef Py_ssize_t n = x.shape[0], width = x.shape[1]
    cdef Py_ssize_t half = head_dim // 2
    cdef Py_ssize_t heads = width // head_dim
    cdef cnp.ndarray[cnp.float64_t, ndim=1] inv_freq = \
        theta ** (-2.0 * np.arange(half, dtype=np.float64) / head_dim)
    cdef double[::1] freq = inv_freq
    cdef cnp.ndarray[cnp.float32_t, ndim=2] out = np.empty((n, width), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] o = out
    cdef Py_ssize_t i, h, j, base
    cdef double ang, c, s, ev, od
    with nogil:
        for i in range(n):
            for j in range(half):
                ang = (<double> positions[i]) * freq[j]
                c = cos(ang)
                s = sin(ang)
                for h in range(heads):
                    base = h * head_dim + 2 * j
                    ev = x[i, base]
                    od = x[i, base + 1]
                    o[i, base] = <cnp.float32_t> (ev * c - od * s)
                    o[i, base + 1] = <cnp.float32_t> (ev * s + od * c)
    return out


def softmax(const cnp.float32_t[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] out = np.empty((n, m), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] o = out
    cdef double[::1] row = np.empty(m, dtype=np.float64)
    cdef Py_ssize_t i, j
    cdef double mx, s
    with nogil:
        for i in range(n):
            mx = x[i, 0]
            for j in range(1, m):
                if x[i, j] > mx:
                    mx = x[i, j]
            s = 0.0
            for j in range(m):
                row[j] = exp((<double> x[i, j]) - mx)
                s += row[j]
            for j in range(m):
                o[i, j] = <cnp.float32_t> (row[j] / s)
    return out


def silu(const cnp.float32_t[:, ::1] x):
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] out = np.empty((n, m), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] o = out
    cdef Py_ssize_t i, j
    cdef double v
    with nogil:
        for i in range(n):
            for j in range(m):
                v = x[i, j]
                o[i, j] = <cnp.float32_t> (v / (1.0 + exp(-v)))
    return out


def masked_attention(const cnp.float32_t[:, ::1] q, const cnp.float32_t[:, ::1] k,
                     const cnp.float32_t[:, ::1] v, const cnp.float32_t[:, ::1] mask,
                     double scale, bint k_transposed=False):
    cdef Py_ssize_t n = q.shape[0], hd = q.shape[1]
    cdef Py_ssize_t cols = k.shape[1] if k_transposed else k.shape[0]
    cdef cnp.ndarray[cnp.float32_t, ndim=2] out = np.zeros((n, hd), dtype=np.float32)
    cdef cnp.float32_t[:, ::1] o = out
    cdef double[::1] w = np.empty(cols, dtype=np.float64)
    cdef double[::1] acc = np.empty(hd, dtype=np.float64)
    cdef Py_ssize_t i, j, p
    cdef double s, mx, denom, wj
    with nogil:
        for i in range(n):
            mx = -1.7976931348623157e308
            for j in range(cols):
                s = 0.0
                if k_transposed:
                    for p in range(hd):
                        s += (<double> q[i, p]) * (<double> k[p, j])
                else:
                    for p in range(hd):
                        s += (<double> q[i, p]) * (<double> k[j, p])
                s = s * scale + (<double> mask[i, j])
                w[j] = s
                if s > mx:
                    mx = s
            denom = 0.0
            for j in range(cols):
                w[j] = exp(w[j] - mx)
                denom += w[j]
            for p in range(hd):
                acc[p] = 0.0
            for j in range(cols):
                wj = w[j] / denom
                for p in range(hd):
                    acc[p] += wj * (<double> v[j, p])
            for p in range(hd):
                o[i, p] = <cnp.float32_t> acc[p]
    return out


def quantize_codes(const cnp.float32_t[::1] x, const cnp.float64_t[::1] scales,
                   long qmin, long qmax):
    # x flattened; scales broadcast element-wise (same length as x).
    cdef Py_ssize_t n = x.shape[0]
    cdef cnp.ndarray[cnp.int8_t, ndim=1] out = np.empty(n, dtype=np.int8)
    cdef cnp.int8_t[::1] o = out
    cdef Py_ssize_t i
    cdef double y, r
    with nogil:
        for i in range(n):
            y = (<double> x[i]) / scales[i]
            r = floor(fabs(y) + 0.5)
            if y < 0:
                r = -r
            if r < qmin:
                r = qmin
            if r > qmax:
                r = qmax
            o[i] = <cnp.int8_t> r
    return out


def dequantize_codes(const cnp.int8_t[::1] codes, const cnp.float64_t[::1] scales):
    cdef Py_ssize_t n = codes.shape[0]
    cdef cnp.ndarray[cnp.float32_t, ndim=1] out = np.empty(n, dtype=np.float32)
    cdef cnp.float32_t[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            o[i] = <cnp.float32_t> ((<double> codes[i]) * scales[i])
    return out


def pack_int4(const cnp.int8_t[::1] codes):
    cdef Py_ssize_t n = codes.shape[0]
    cdef Py_ssize_t nbytes = (n + 1) // 2
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] out = np.zeros(nbytes, dtype=np.uint8)
    cdef cnp.uint8_t[::1] o = out
    cdef Py_ssize_t i
    cdef unsigned char lo, hi
    with nogil:
        for i in range(nbytes):
            lo = (<unsigned char> codes[2 * i]) & 0xF
            hi = ((<unsigned char> codes[2 * i + 1]) & 0xF) if 2 * i + 1 < n else 0
            o[i] = lo | (hi << 4)
    return out


def unpack_int4(const cnp.uint8_t[::1] packed, Py_ssize_t count):
    cdef cnp.ndarray[cnp.int8_t, ndim=1] out = np.empty(count, dtype=np.int8)
    cdef cnp.int8_t[::1] o = out
    cdef Py_ssize_t i
    cdef int nib
    with nogil:
        for i in range(count):
            nib = (packed[i // 2] >> (4 * (i & 1))) & 0xF
            o[i] = <cnp.int8_t> ((nib ^ 8) - 8)
    return out
