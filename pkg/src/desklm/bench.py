"""Benchmarks comparing the compiled kernel core against the numpy fallback.

Two views: per-kernel microbenchmarks at decode-time shapes, and end-to-end
greedy decode throughput with each backend driving the whole runtime.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .model import greedy_decode
from .toygen import ToySpec, build_toy_weights


def _time_call(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _kernel_cases(rng):
    n, e, hd, c, mh, v = 32, 64, 16, 256, 256, 258
    x = rng.normal(0, 0.5, (n, e)).astype(np.float32)
    w = rng.normal(0, 0.02, (e, v)).astype(np.float32)
    gain = np.ones(e, np.float32)
    q = rng.normal(0, 0.5, (n, hd)).astype(np.float32)
    k = rng.normal(0, 0.5, (c, hd)).astype(np.float32)
    vv = rng.normal(0, 0.5, (c, hd)).astype(np.float32)
    mask = np.zeros((n, c), np.float32)
    pos = np.arange(n, dtype=np.int64)
    act = rng.normal(0, 0.5, (n, mh)).astype(np.float32)
    wts = rng.normal(0, 0.02, (e, mh)).astype(np.float32)
    scales = np.abs(wts).max(axis=0) / 7.0
    codes = kernels.quantize_codes(wts, scales[None, :], -8, 7)
    x1, q1 = x[:1], q[:1]
    mask1 = mask[:1]
    return {
        "matmul_1x64x258": lambda: kernels.matmul(x1, w),
        "matmul_32x64x258": lambda: kernels.matmul(x, w),
        "rmsnorm_1x64": lambda: kernels.rmsnorm(x1, gain, 1e-5),
        "rmsnorm_32x64": lambda: kernels.rmsnorm(x, gain, 1e-5),
        "rope_1x64": lambda: kernels.rope_rotate(x1, pos[:1], hd, 10000.0),
        "rope_32x64": lambda: kernels.rope_rotate(x, pos, hd, 10000.0),
        "attention_1q_256kv": lambda: kernels.masked_attention(q1, k, vv, mask1, 0.25),
        "attention_32q_256kv": lambda: kernels.masked_attention(q, k, vv, mask, 0.25),
        "softmax_32x256": lambda: kernels.softmax(mask + 1.0),
        "silu_32x256": lambda: kernels.silu(act),
        "quantize_64x256": lambda: kernels.quantize_codes(wts, scales[None, :], -8, 7),
        "pack_int4_16k": lambda: kernels.pack_int4(codes),
    }


@dataclass
class BenchResult:
    kernels: dict = field(default_factory=dict)
    decode: dict = field(default_factory=dict)
    backends: list = field(default_factory=list)

    def to_dict(self):
        return {"backends": self.backends, "kernels": self.kernels,
                "decode": self.decode}

    def summary_lines(self):
        lines = [f"backends: {', '.join(self.backends)}"]
        if len(self.backends) == 2:
            lines.append(f"{'kernel':24s} {'numpy':>12s} {'compiled':>12s} {'speedup':>8s}")
            for name, rec in self.kernels.items():
                su = rec["numpy"] / rec["compiled"] if rec.get("compiled") else 0.0
                lines.append(f"{name:24s} {rec['numpy'] * 1e6:10.1f}us "
                             f"{rec.get('compiled', 0) * 1e6:10.1f}us {su:7.2f}x")
        else:
            for name, rec in self.kernels.items():
                lines.append(f"{name:24s} {rec['numpy'] * 1e6:10.1f}us")
        for backend, rec in self.decode.items():
            lines.append(f"decode [{backend}]: {rec['tokens_per_second']:.1f} tok/s "
                         f"({rec['tokens']} tokens in {rec['seconds']:.3f}s)")
        return lines


def run_benchmark(seed: int = 0, repeats: int = 50,
                  decode_tokens: int = 64) -> BenchResult:
    rng = np.random.default_rng(seed)
    result = BenchResult(backends=kernels.available_backends())
    prev = kernels.backend_name()
    try:
        for backend in result.backends:
            kernels.use_backend(backend)
            cases = _kernel_cases(rng)
            for name, fn in cases.items():
                fn()  # warm up / JIT caches
                result.kernels.setdefault(name, {})[backend] = _time_call(fn, repeats)
        spec = ToySpec(seed=seed)
        weights = build_toy_weights(spec)
        prompt = [int(b) for b in b"the quick brown fox"]
        for backend in result.backends:
            kernels.use_backend(backend)
            greedy_decode(weights, prompt, 4)  # warm up
            t0 = time.perf_counter()
            out = greedy_decode(weights, prompt, decode_tokens)
            dt = time.perf_counter() - t0
            result.decode[backend] = {
                "tokens": len(out), "seconds": dt,
                "tokens_per_second": len(out) / dt,
            }
    finally:
        kernels.use_backend(prev)
    return result
