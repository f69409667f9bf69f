"""Frozen decoder-only runtime: config, weights, KV cache, masks, forward.

The model is a pre-norm decoder stack (RMSNorm -> projections -> RoPE on
Q/K -> per-head attention over the KV cache -> output projection, then
RMSNorm -> SwiGLU MLP), with logits from a final RMSNorm and an output head
that by default reuses the token embedding transposed.

Weights are frozen after construction (arrays are marked read-only); all
руntime adaptation arrives through the per-call hooks:

  * ``injections``  — raw embedding rows that bypass the token lookup
                      (used for lookahead prefix/slot rows),
  * ``lora_delta``  — low-rank additions to the four attention projections,
  * ``act_fq``      — activation transform at matmul boundaries
                      (used for fake quantization).

Concurrency contract: one ``ModelWeights`` may back any number of sessions;
a ``DecodeSession`` (cache + decode loop) is single-threaded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import CapacityError, ShapeError

NEG = np.float32(-1.0e9)  # additive mask sentinel for "hidden"

K_PLAIN = "k_plain"
K_TRANSPOSED = "k_transposed"


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int
    num_heads: int
    latent_dim: int
    num_layers: int
    mlp_hidden: int
    vocab_size: int
    max_seq_len: int
    rope_theta: float = 10000.0
    rms_eps: float = 1e-5
    tied_head: bool = True

    def __post_init__(self):
        dims = (self.embed_dim, self.num_heads, self.latent_dim,
                self.num_layers, self.mlp_hidden, self.vocab_size, self.max_seq_len)
        if any(d < 1 for d in dims):
            raise ShapeError(f"all dimensions must be >= 1, got {dims}")
        if self.latent_dim % self.num_heads:
            raise ShapeError(
                f"num_heads {self.num_heads} must divide latent_dim {self.latent_dim}")
        if self.latent_dim // self.num_heads % 2:
            raise ShapeError("head_dim must be even for pairwise rotation")
        if self.rope_theta <= 0 or self.rms_eps <= 0:
            raise ShapeError("rope_theta and rms_eps must be positive")

    @property
    def head_dim(self) -> int:
        return self.latent_dim // self.num_heads

    def to_dict(self):
        return {
            "embed_dim": self.embed_dim, "num_heads": self.num_heads,
            "latent_dim": self.latent_dim, "num_layers": self.num_layers,
            "mlp_hidden": self.mlp_hidden, "vocab_size": self.vocab_size,
            "max_seq_len": self.max_seq_len, "rope_theta": self.rope_theta,
            "rms_eps": self.rms_eps, "tied_head": self.tied_head,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class LayerWeights:
    attn_gain: np.ndarray   # (E,)
    wq: np.ndarray          # (E, L)
    wk: np.ndarray          # (E, L)
    wv: np.ndarray          # (E, L)
    wo: np.ndarray          # (L, E)
    mlp_gain: np.ndarray    # (E,)
    w_up: np.ndarray        # (E, mlp_hidden)
    w_gate: np.ndarray      # (E, mlp_hidden)
    w_down: np.ndarray      # (mlp_hidden, E)

    ATTN_MATS = ("wq", "wk", "wv", "wo")
    MLP_MATS = ("w_up", "w_gate", "w_down")


class ModelWeights:
    """Immutable parameter set for one model."""

    def __init__(self, config: ModelConfig, token_embedding, layers, final_gain,
                 head=None):
        self.config = config
        self.token_embedding = np.asarray(token_embedding, dtype=np.float32)
        self.layers = list(layers)
        self.final_gain = np.asarray(final_gain, dtype=np.float32)
        self.head = None if head is None else np.asarray(head, dtype=np.float32)
        self._check_shapes()
        if config.tied_head:
            if self.head is not None:
                raise ShapeError("tied_head config must not carry a head matrix")
            self._head_matrix = np.ascontiguousarray(self.token_embedding.T)
        else:
            if self.head is None:
                raise ShapeError("untied config requires a head matrix")
            self._head_matrix = self.head
        self._freeze()

    def _check_shapes(self):
        c = self.config
        e, l, m, v = c.embed_dim, c.latent_dim, c.mlp_hidden, c.vocab_size
        if self.token_embedding.shape != (v, e):
            raise ShapeError(f"token_embedding shape {self.token_embedding.shape} != {(v, e)}")
        if len(self.layers) != c.num_layers:
            raise ShapeError(f"expected {c.num_layers} layers, got {len(self.layers)}")
        expect = {"attn_gain": (e,), "wq": (e, l), "wk": (e, l), "wv": (e, l),
                  "wo": (l, e), "mlp_gain": (e,), "w_up": (e, m),
                  "w_gate": (e, m), "w_down": (m, e)}
        for i, lw in enumerate(self.layers):
            for name, shape in expect.items():
                arr = getattr(lw, name)
                if arr.shape != shape:
                    raise ShapeError(f"layers[{i}].{name} shape {arr.shape} != {shape}")
        if self.final_gain.shape != (e,):
            raise ShapeError("final_gain shape mismatch")
        if self.head is not None and self.head.shape != (e, v):
            raise ShapeError(f"head shape {self.head.shape} != {(e, v)}")

    def _freeze(self):
        for arr in self.all_tensors().values():
            arr.flags.writeable = False
        self._head_matrix.flags.writeable = False

    def all_tensors(self) -> dict[str, np.ndarray]:
        out = {"token_embedding": self.token_embedding}
        for i, lw in enumerate(self.layers):
            for name in ("attn_gain", "wq", "wk", "wv", "wo",
                         "mlp_gain", "w_up", "w_gate", "w_down"):
                out[f"layers.{i}.{name}"] = getattr(lw, name)
        out["final_gain"] = self.final_gain
        if self.head is not None:
            out["head"] = self.head
        return out

    @property
    def head_matrix(self) -> np.ndarray:
        """(E, vocab) output projection; the embedding transposed when tied."""
        return self._head_matrix

    def fingerprint(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name in sorted(self.all_tensors()):
            h.update(name.encode())
            h.update(self.all_tensors()[name].tobytes())
        return h.hexdigest()


class AttentionMask:
    """Additive attention mask: 0 = visible, NEG = hidden.

    Rows are this step's query rows; columns index KV-cache rows after the
    step's writes (so a query's own row is a column it can see).
    """

    def __init__(self, data):
        data = np.ascontiguousarray(data, dtype=np.float32)
        if data.ndim != 2:
            raise ShapeError("mask must be 2-D")
        self.data = data

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    def check_rows_visible(self):
        if self.rows and not (self.data == 0.0).any(axis=1).all():
            raise ShapeError("every mask row must have at least one visible column")
        return self

    @classmethod
    def causal(cls, n: int, past: int) -> "AttentionMask":
        """Continuation mask: row i sees all `past` columns plus new rows <= i."""
        m = np.full((n, past + n), NEG, dtype=np.float32)
        for i in range(n):
            m[i, : past + i + 1] = 0.0
        return cls(m)

    @classmethod
    def full_visibility(cls, n: int, cols: int) -> "AttentionMask":
        return cls(np.zeros((n, cols), dtype=np.float32))

    @classmethod
    def from_visible(cls, rows: int, cols: int, visible) -> "AttentionMask":
        """Build from an iterable of per-row visible column sets."""
        m = np.full((rows, cols), NEG, dtype=np.float32)
        for i, vis in enumerate(visible):
            m[i, sorted(vis)] = 0.0
        return cls(m)


def _mask_array(mask) -> np.ndarray:
    return mask.data if isinstance(mask, AttentionMask) else np.asarray(mask, np.float32)


class KvCache:
    """Per-layer K/V row store with segment bookkeeping.

    ``layout_tag`` fixes how K is stored: ``k_plain`` keeps rows of the
    sequence ((max_seq_len, L)); ``k_transposed`` keeps the transpose.  Both
    produce identical attention results; the tag never changes.
    """

    def __init__(self, config: ModelConfig, layout: str = K_PLAIN):
        if layout not in (K_PLAIN, K_TRANSPOSED):
            raise ValueError(f"unknown cache layout {layout!r}")
        s, l = config.max_seq_len, config.latent_dim
        self.config = config
        self.layout_tag = layout
        kshape = (s, l) if layout == K_PLAIN else (l, s)
        self._k = [np.zeros(kshape, dtype=np.float32) for _ in range(config.num_layers)]
        self._v = [np.zeros((s, l), dtype=np.float32) for _ in range(config.num_layers)]
        self.fill_count = 0
        self.segment_table: list[tuple[str, int, int]] = []

    # -- row IO ------------------------------------------------------------

    def put(self, layer: int, write_rows, k_rows, v_rows):
        if self.layout_tag == K_PLAIN:
            self._k[layer][write_rows, :] = k_rows
        else:
            self._k[layer][:, write_rows] = k_rows.T
        self._v[layer][write_rows, :] = v_rows

    def k_view(self, layer: int, upto: int):
        """K for rows [0, upto): (upto, L) plain or (L, upto) transposed."""
        if self.layout_tag == K_PLAIN:
            return self._k[layer][:upto, :]
        return self._k[layer][:, :upto]

    def v_view(self, layer: int, upto: int):
        return self._v[layer][:upto, :]

    def k_rows(self, layer: int, rows):
        """K rows by index in sequence orientation, regardless of layout."""
        if self.layout_tag == K_PLAIN:
            return self._k[layer][rows, :]
        return self._k[layer][:, rows].T

    def poke_rows(self, layer: int, rows, k_rows=None, v_rows=None):
        """Overwrite stored rows in place (isolation tests)."""
        if k_rows is not None:
            if self.layout_tag == K_PLAIN:
                self._k[layer][rows, :] = k_rows
            else:
                self._k[layer][:, rows] = k_rows.T
        if v_rows is not None:
            self._v[layer][rows, :] = v_rows

    # -- fill bookkeeping ----------------------------------------------------

    def advance_to(self, extent: int):
        if extent > self.config.max_seq_len:
            raise CapacityError(
                f"cache extent {extent} exceeds max_seq_len {self.config.max_seq_len}")
        self.fill_count = max(self.fill_count, extent)

    def truncate(self, new_fill: int):
        if not 0 <= new_fill <= self.fill_count:
            raise ValueError("truncate target outside current fill")
        self.fill_count = new_fill

    def keep_rows(self, rows, base: int):
        """Compact: move `rows` (in order) to [base, base+len) and truncate.

        Row contents are position-encoded at write time, so moving storage
        rows never changes what they mean; callers keep logical positions
        consistent themselves.
        """
        rows = list(rows)
        for layer in range(self.config.num_layers):
            k = self.k_rows(layer, rows)
            v = self._v[layer][rows, :]
            dst = np.arange(base, base + len(rows))
            self.put(layer, dst, k, v)
        self.fill_count = base + len(rows)

    # -- segments --------------------------------------------------------------

    def set_segments(self, table):
        """Install a (segment_id, start, length) table covering [0, fill_count)."""
        table = [(str(sid), int(start), int(length)) for sid, start, length in table]
        pos = 0
        for sid, start, length in table:
            if start != pos or length < 0:
                raise ShapeError(f"segments must be ordered, disjoint and contiguous; "
                                 f"bad entry {(sid, start, length)} at offset {pos}")
            pos += length
        if pos != self.fill_count:
            raise ShapeError(f"segments cover {pos} rows, fill_count is {self.fill_count}")
        self.segment_table = table

    def segment(self, sid: str):
        for name, start, length in self.segment_table:
            if name == sid:
                return start, length
        raise KeyError(sid)


# -- public ops ------------------------------------------------------------


def rms_norm(x, gain, eps: float = 1e-5):
    """Scale each row by 1/sqrt(mean(x_i^2)+eps), then by the per-dim gain."""
    x = np.asarray(x, dtype=np.float32)
    gain = np.asarray(gain, dtype=np.float32)
    if x.shape[-1] != gain.shape[-1]:
        raise ShapeError(f"gain width {gain.shape} does not match rows {x.shape}")
    if eps <= 0 and not np.any(x):
        # eps=0 on a zero row would divide by zero; keep the zero-input identity
        return np.zeros_like(x)
    return kernels.rmsnorm(x, gain, eps)


def apply_rope(x, positions, theta: float = 10000.0, head_dim: int | None = None):
    """Rotate adjacent pairs; pair j at position p turns by p * theta^(-2j/hd)."""
    x = np.asarray(x, dtype=np.float32)
    hd = x.shape[-1] if head_dim is None else head_dim
    if hd % 2:
        raise ShapeError(f"head_dim must be even, got {hd}")
    if x.shape[-1] % hd:
        raise ShapeError("row width must be a multiple of head_dim")
    positions = np.asarray(positions)
    if np.any(positions < 0):
        raise ShapeError("positions must be nonnegative")
    return kernels.rope_rotate(x, positions, hd, theta)


def attention_step(q, k, v, cache: KvCache, layer: int, mask, write_rows=None):
    """Write this step's K/V rows, then per-head masked attention over the cache.

    Returns the concatenated head outputs (n, L).  ``mask`` must have one
    column per cache row after the write (cached + current rows).
    """
    cfg = cache.config
    q = np.asarray(q, np.float32)
    n = q.shape[0]
    if write_rows is None:
        write_rows = np.arange(cache.fill_count, cache.fill_count + n)
    else:
        write_rows = np.asarray(write_rows, dtype=np.int64)
    extent = max(cache.fill_count, int(write_rows.max()) + 1) if n else cache.fill_count
    if extent > cfg.max_seq_len:
        raise CapacityError(
            f"writing rows up to {extent} exceeds max_seq_len {cfg.max_seq_len}")
    m = _mask_array(mask)
    if m.shape != (n, extent):
        raise ShapeError(f"mask shape {m.shape} != {(n, extent)}")
    cache.put(layer, write_rows, np.asarray(k, np.float32), np.asarray(v, np.float32))
    cache.advance_to(extent)

    kl = cache.k_view(layer, extent)
    vl = cache.v_view(layer, extent)
    transposed = cache.layout_tag == K_TRANSPOSED
    hd = cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    out = np.empty((n, cfg.latent_dim), dtype=np.float32)
    for h in range(cfg.num_heads):
        cols = slice(h * hd, (h + 1) * hd)
        kh = kl[cols, :] if transposed else kl[:, cols]
        out[:, cols] = kernels.masked_attention(
            q[:, cols], kh, vl[:, cols], m, scale, k_transposed=transposed)
    return out


def _apply_fq(act_fq, site, x):
    return x if act_fq is None else act_fq(site, x)


def _layer_forward(lw: LayerWeights, li: int, h, cache, mask, positions,
                   write_rows, cfg: ModelConfig, lora_delta, act_fq):
    xn = kernels.rmsnorm(h, lw.attn_gain, cfg.rms_eps)
    xa = _apply_fq(act_fq, f"{li}.attn_in", xn)
    q = kernels.matmul(xa, lw.wq)
    k = kernels.matmul(xa, lw.wk)
    v = kernels.matmul(xa, lw.wv)
    if lora_delta is not None:
        q = q + lora_delta(li, "q", xa)
        k = k + lora_delta(li, "k", xa)
        v = v + lora_delta(li, "v", xa)
    q = kernels.rope_rotate(q, positions, cfg.head_dim, cfg.rope_theta)
    k = kernels.rope_rotate(k, positions, cfg.head_dim, cfg.rope_theta)
    attn = attention_step(q, k, v, cache, li, mask, write_rows)
    ao = _apply_fq(act_fq, f"{li}.attn_out", attn)
    o = kernels.matmul(ao, lw.wo)
    if lora_delta is not None:
        o = o + lora_delta(li, "o", ao)
    h = h + o

    xn2 = kernels.rmsnorm(h, lw.mlp_gain, cfg.rms_eps)
    xm = _apply_fq(act_fq, f"{li}.mlp_in", xn2)
    up = kernels.matmul(xm, lw.w_up)
    gate = kernels.matmul(xm, lw.w_gate)
    act = kernels.silu(gate) * up
    am = _apply_fq(act_fq, f"{li}.mlp_down", act)
    return h + kernels.matmul(am, lw.w_down)


def layer_step(lw: LayerWeights, cfg: ModelConfig, x, cache_k, cache_v, positions, mask):
    """One decoder layer as a pure function over explicit cache arrays.

    Reference unit for the graph interpreter; `forward` runs the same math
    through the KvCache.  Returns (y, k_new, v_new).
    """
    x = np.asarray(x, np.float32)
    xn = kernels.rmsnorm(x, lw.attn_gain, cfg.rms_eps)
    q = kernels.rope_rotate(kernels.matmul(xn, lw.wq), positions, cfg.head_dim, cfg.rope_theta)
    k = kernels.rope_rotate(kernels.matmul(xn, lw.wk), positions, cfg.head_dim, cfg.rope_theta)
    v = kernels.matmul(xn, lw.wv)
    k_all = np.concatenate([cache_k, k], axis=0) if cache_k is not None else k
    v_all = np.concatenate([cache_v, v], axis=0) if cache_v is not None else v
    m = _mask_array(mask)
    hd = cfg.head_dim
    scale = 1.0 / math.sqrt(hd)
    ctx = np.empty((x.shape[0], cfg.latent_dim), dtype=np.float32)
    for hidx in range(cfg.num_heads):
        cols = slice(hidx * hd, (hidx + 1) * hd)
        ctx[:, cols] = kernels.masked_attention(
            q[:, cols], k_all[:, cols], v_all[:, cols], m, scale)
    h = x + kernels.matmul(ctx, lw.wo)
    xn2 = kernels.rmsnorm(h, lw.mlp_gain, cfg.rms_eps)
    act = kernels.silu(kernels.matmul(xn2, lw.w_gate)) * kernels.matmul(xn2, lw.w_up)
    y = h + kernels.matmul(act, lw.w_down)
    return y, k, v


def forward(weights: ModelWeights, tokens, cache: KvCache, mask, *,
            positions=None, write_rows=None, injections=None,
            lora_delta=None, act_fq=None):
    """Run the decoder over `tokens`, returning logits for every input row.

    ``tokens`` may carry -1 at rows covered by ``injections`` (a map of row
    index -> embedding row that bypasses the token lookup).  ``positions``
    are the RoPE positions per row and ``write_rows`` the cache rows written;
    both default to consecutive continuation of the current fill.
    """
    cfg = weights.config
    tokens = list(tokens)
    n = len(tokens)
    injections = injections or {}
    start = cache.fill_count
    if positions is None:
        positions = np.arange(start, start + n)
    else:
        positions = np.asarray(positions)
    if write_rows is None:
        write_rows = np.arange(start, start + n)
    else:
        write_rows = np.asarray(write_rows, dtype=np.int64)
    if len(positions) != n or len(write_rows) != n:
        raise ShapeError("positions/write_rows must match token count")

    h = np.empty((n, cfg.embed_dim), dtype=np.float32)
    for i, t in enumerate(tokens):
        if i in injections:
            row = np.asarray(injections[i], dtype=np.float32)
            if row.shape != (cfg.embed_dim,):
                raise ShapeError(f"injection row {i} has shape {row.shape}")
            h[i] = row
        else:
            if not 0 <= t < cfg.vocab_size:
                raise ShapeError(f"token id {t} outside vocab of {cfg.vocab_size}")
            h[i] = weights.token_embedding[t]

    for li, lw in enumerate(weights.layers):
        h = _layer_forward(lw, li, h, cache, mask, positions, write_rows,
                           cfg, lora_delta, act_fq)

    hn = kernels.rmsnorm(h, weights.final_gain, cfg.rms_eps)
    hn = _apply_fq(act_fq, "head", hn)
    return kernels.matmul(hn, weights.head_matrix)


class DecodeSession:
    """One (cache, decode loop) pair over shared frozen weights."""

    def __init__(self, weights: ModelWeights, *, layout: str = K_PLAIN,
                 lora_delta=None, act_fq=None):
        self.weights = weights
        self.cache = KvCache(weights.config, layout)
        self.lora_delta = lora_delta
        self.act_fq = act_fq
        self.forward_calls = 0

    @property
    def config(self) -> ModelConfig:
        return self.weights.config

    def forward(self, tokens, mask, **kw):
        self.forward_calls += 1
        return forward(self.weights, tokens, self.cache, mask,
                       lora_delta=self.lora_delta, act_fq=self.act_fq, **kw)

    def prefill(self, tokens):
        mask = AttentionMask.causal(len(tokens), self.cache.fill_count)
        return self.forward(tokens, mask)


def greedy_decode(weights: ModelWeights, prompt, max_new: int, *, eos=None,
                  forced_first=None, lora_delta=None, act_fq=None,
                  layout: str = K_PLAIN):
    """Plain autoregressive argmax decoding; the oracle for every fancier mode."""
    session = DecodeSession(weights, layout=layout, lora_delta=lora_delta, act_fq=act_fq)
    logits = session.prefill(list(prompt))
    out = []
    cur = int(np.argmax(logits[-1])) if forced_first is None else int(forced_first)
    out.append(cur)
    while len(out) < max_new and cur != eos:
        mask = AttentionMask.causal(1, session.cache.fill_count)
        logits = session.forward([cur], mask)
        cur = int(np.argmax(logits[0]))
        out.append(cur)
    return out
