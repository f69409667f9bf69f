"""Concurrent multi-stream token generation over a segmented KV cache.

One prefill, n distinct first tokens, then lockstep decoding: every model
call carries one row per live stream, and a block mask keeps each stream's
attention inside the shared prefill plus its own cache segment.  Greedy
streams are therefore exactly equal to n independent runs that force the
same first tokens — the sequential baseline is the oracle, the lockstep
run is the optimization.

Cache layout: fixed-stride segments, one per stream, allocated right after
the prefill rows.  Finished streams keep their segment (no compaction).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import CapacityError, ShapeError
from .model import NEG, AttentionMask, DecodeSession, ModelWeights, greedy_decode


def sample_distinct_first_tokens(logits, n: int, *, rng=None) -> list[int]:
    """n distinct token ids from one logits row.

    Deterministic mode (rng None): top-n by logit, ties broken by lower id.
    Stochastic mode: sample without replacement proportional to softmax.
    """
    logits = np.asarray(logits, dtype=np.float32).ravel()
    if n > logits.size:
        raise ShapeError(f"cannot draw {n} distinct tokens from vocab {logits.size}")
    if rng is None:
        order = np.lexsort((np.arange(logits.size), -logits.astype(np.float64)))
        return [int(t) for t in order[:n]]
    probs = np.exp(logits - logits.max())
    probs /= probs.sum()
    return [int(t) for t in
            rng.choice(logits.size, size=n, replace=False, p=probs)]


def build_stream_mask(prefill_len: int, segment_lengths, active_flags) -> AttentionMask:
    """Mask for one lockstep step in the packed layout
    [prefill | seg_0 .. seg_{n-1} | current row per active stream].

    Row i (the i-th active stream) sees the prefill, its own segment, and its
    own current position; everything cross-stream stays hidden.
    """
    segment_lengths = [int(s) for s in segment_lengths]
    if any(s < 0 for s in segment_lengths):
        raise ShapeError("segment lengths must be >= 0")
    active = [bool(a) for a in active_flags]
    if len(active) != len(segment_lengths):
        raise ShapeError("active flags must match segment count")
    n_active = sum(active)
    total = prefill_len + sum(segment_lengths) + n_active
    m = np.full((n_active, total), NEG, dtype=np.float32)
    starts = np.concatenate([[prefill_len],
                             prefill_len + np.cumsum(segment_lengths)])
    row = 0
    for i, is_active in enumerate(active):
        if not is_active:
            continue
        m[row, :prefill_len] = 0.0
        m[row, starts[i]: starts[i] + segment_lengths[i]] = 0.0
        m[row, prefill_len + sum(segment_lengths) + row] = 0.0
        row += 1
    return AttentionMask(m)


@dataclass
class StreamSet:
    n_streams: int
    first_tokens: list[int]
    buffers: list[list[int]] = field(default_factory=list)
    finished: list[bool] = field(default_factory=list)
    prefill_segment: str = "prefill"
    segment_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(set(self.first_tokens)) != len(self.first_tokens):
            raise ShapeError("first tokens must be pairwise distinct")
        if not self.buffers:
            self.buffers = [[t] for t in self.first_tokens]
        if not self.finished:
            self.finished = [False] * self.n_streams
        if not self.segment_ids:
            self.segment_ids = [f"s{i}" for i in range(self.n_streams)]


@dataclass
class MultiStreamResult:
    streams: list[list[int]]
    prefill_calls: int
    decode_calls: int
    first_tokens: list[int]

    def to_dict(self):
        return {"streams": self.streams, "prefill_calls": self.prefill_calls,
                "decode_calls": self.decode_calls, "first_tokens": self.first_tokens,
                "max_continuation": max((len(s) - 1 for s in self.streams), default=0)}


def _strided_step_mask(prefill_len, stride, n_streams, written, active_ids):
    """Isolation mask against the reserved strided cache layout; column
    seg_start + written_i is the stream's current row (written this step)."""
    total = prefill_len + n_streams * stride
    m = np.full((len(active_ids), total), NEG, dtype=np.float32)
    for row, i in enumerate(active_ids):
        base = prefill_len + i * stride
        m[row, :prefill_len] = 0.0
        m[row, base: base + written[i] + 1] = 0.0
    return AttentionMask(m)


def run_multistream(session: DecodeSession, prompt, n_streams: int,
                    max_len: int, eos=None, *, first_tokens=None,
                    rng=None) -> MultiStreamResult:
    """Decode n streams in lockstep after a single shared prefill.

    ``max_len`` caps each stream's token count including its first token.
    Greedy unless ``rng`` is given (seeded per-stream sampling).
    """
    prompt = list(prompt)
    cfg = session.config
    stride = max_len
    need = len(prompt) + n_streams * stride
    if need > cfg.max_seq_len:
        raise CapacityError(
            f"prompt {len(prompt)} + {n_streams} x {stride} rows exceed "
            f"max_seq_len {cfg.max_seq_len}")

    logits = session.prefill(prompt)
    prefill_calls = 1
    prefill_len = session.cache.fill_count
    if first_tokens is None:
        first_tokens = sample_distinct_first_tokens(logits[-1], n_streams, rng=rng)
    streams = StreamSet(n_streams=n_streams, first_tokens=list(first_tokens))

    # reserve one fixed-stride segment per stream
    session.cache.advance_to(need)
    session.cache.set_segments(
        [(streams.prefill_segment, 0, prefill_len)]
        + [(streams.segment_ids[i], prefill_len + i * stride, stride)
           for i in range(n_streams)])

    written = [0] * n_streams  # cached rows per stream (current not yet written)
    decode_calls = 0
    while True:
        active = [i for i in range(n_streams) if not streams.finished[i]]
        for i in active[:]:
            buf = streams.buffers[i]
            if buf[-1] == eos or len(buf) >= max_len:
                streams.finished[i] = True
                active.remove(i)
        if not active:
            break
        tokens = [streams.buffers[i][-1] for i in active]
        positions = [prefill_len + written[i] for i in active]
        write_rows = [prefill_len + i * stride + written[i] for i in active]
        mask = _strided_step_mask(prefill_len, stride, n_streams, written, active)
        logits = session.forward(tokens, mask, positions=positions,
                                 write_rows=write_rows)
        decode_calls += 1
        for row, i in enumerate(active):
            written[i] += 1
            if rng is None:
                nxt = int(np.argmax(logits[row]))
            else:
                p = np.exp(logits[row].astype(np.float64) - logits[row].max())
                p /= p.sum()
                nxt = int(rng.choice(cfg.vocab_size, p=p))
            streams.buffers[i].append(nxt)
    return MultiStreamResult(streams=streams.buffers, prefill_calls=prefill_calls,
                             decode_calls=decode_calls, first_tokens=list(first_tokens))


def sequential_baseline(weights: ModelWeights, prompt, first_tokens, max_len,
                        eos=None, **kw) -> list[list[int]]:
    """The n-independent-runs oracle: fresh prefill per stream, forced first
    token, plain greedy decode."""
    return [greedy_decode(weights, prompt, max_len, eos=eos, forced_first=t, **kw)
            for t in first_tokens]


def latency_model(prefill_ms: float, ar_ms: float, n_streams: int,
                  tokens_per_stream: int):
    """(sequential_total, concurrent_total) under a constant per-step cost:
    sequential runs the decode loop once per stream, concurrent shares it."""
    if min(prefill_ms, ar_ms, n_streams, tokens_per_stream) < 0:
        raise ShapeError("latency model inputs must be nonnegative")
    sequential = prefill_ms + ar_ms * n_streams * tokens_per_stream
    concurrent = prefill_ms + ar_ms * tokens_per_stream
    return sequential, concurrent
