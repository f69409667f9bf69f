import math

import numpy as np
import pytest

from desklm.errors import CapacityError, ShapeError
from desklm.model import (AttentionMask, DecodeSession, KvCache, ModelConfig,
                          apply_rope, attention_step, forward, greedy_decode,
                          layer_step, rms_norm)
from desklm.toygen import build_toy_weights

from conftest import tiny_spec


# -- rms_norm -------------------------------------------------------------


def test_rms_norm_zero_rows_stay_zero():
    out = rms_norm(np.zeros((2, 4), np.float32), np.ones(4, np.float32))
    assert np.array_equal(out, np.zeros((2, 4)))


def test_rms_norm_hand_example():
    out = rms_norm(np.array([[3.0, 4.0]], np.float32), np.ones(2, np.float32), eps=0.0)
    assert np.allclose(out, [[0.8485, 1.1314]], atol=1e-4)


def test_rms_norm_zero_gain_annihilates(rng):
    x = rng.normal(size=(3, 5)).astype(np.float32)
    assert not rms_norm(x, np.zeros(5, np.float32)).any()


def test_rms_norm_shape_mismatch():
    with pytest.raises(ShapeError):
        rms_norm(np.zeros((2, 4), np.float32), np.ones(3, np.float32))


# -- rope -----------------------------------------------------------------


def test_apply_rope_identity_and_closed_form():
    x = np.array([[1.0, 0.0]], np.float32)
    assert np.array_equal(apply_rope(x, [0], head_dim=2), x)
    out = apply_rope(x, [1], theta=10000.0, head_dim=2)
    assert np.allclose(out, [[math.cos(1.0), math.sin(1.0)]], atol=1e-6)


def test_apply_rope_rejects_odd_head_dim():
    with pytest.raises(ShapeError):
        apply_rope(np.zeros((1, 3), np.float32), [0], head_dim=3)


def test_apply_rope_norm_preserved(rng):
    x = rng.normal(size=(4, 12)).astype(np.float32)
    out = apply_rope(x, [3, 9, 100, 7], head_dim=4)
    assert np.allclose(np.linalg.norm(out, axis=1), np.linalg.norm(x, axis=1),
                       rtol=1e-5)


# -- attention_step --------------------------------------------------------


def _mini_config(**kw):
    base = dict(embed_dim=8, num_heads=2, latent_dim=8, num_layers=1,
                mlp_hidden=8, vocab_size=16, max_seq_len=12)
    base.update(kw)
    return ModelConfig(**base)


def test_attention_step_single_row_returns_v(rng):
    cfg = _mini_config()
    cache = KvCache(cfg)
    q, k, v = (rng.normal(size=(1, 8)).astype(np.float32) for _ in range(3))
    out = attention_step(q, k, v, cache, 0, AttentionMask.causal(1, 0))
    assert np.allclose(out, v, atol=1e-6)
    assert cache.fill_count == 1


def test_attention_step_uniform_over_identical_keys(rng):
    cfg = _mini_config()
    cache = KvCache(cfg)
    q = rng.normal(size=(1, 8)).astype(np.float32)
    krow = rng.normal(size=8).astype(np.float32)
    k3 = np.tile(krow, (3, 1))
    v3 = rng.normal(size=(3, 8)).astype(np.float32)
    attention_step(rng.normal(size=(2, 8)).astype(np.float32), k3[:2], v3[:2],
                   cache, 0, AttentionMask.causal(2, 0))
    out = attention_step(q, k3[2:], v3[2:], cache, 0,
                         AttentionMask.full_visibility(1, 3))
    assert np.allclose(out, v3.mean(axis=0), atol=1e-6)


def test_attention_step_matches_full_recompute(rng):
    cfg = _mini_config()
    cache = KvCache(cfg)
    n_total = 6
    q = rng.normal(size=(n_total, 8)).astype(np.float32)
    k = rng.normal(size=(n_total, 8)).astype(np.float32)
    v = rng.normal(size=(n_total, 8)).astype(np.float32)
    # incremental: one row at a time
    rows = [attention_step(q[i:i + 1], k[i:i + 1], v[i:i + 1], cache, 0,
                           AttentionMask.causal(1, i))
            for i in range(n_total)]
    got = np.vstack(rows)
    # oracle: full-sequence recompute without any cache
    hd = cfg.head_dim
    want = np.empty_like(got)
    causal = AttentionMask.causal(n_total, 0).data.astype(np.float64)
    for h in range(cfg.num_heads):
        cols = slice(h * hd, (h + 1) * hd)
        s = q[:, cols].astype(np.float64) @ k[:, cols].astype(np.float64).T
        s = s / math.sqrt(hd) + causal
        w = np.exp(s - s.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        want[:, cols] = (w @ v[:, cols].astype(np.float64)).astype(np.float32)
    assert np.max(np.abs(got - want)) <= 1e-6


def test_attention_step_capacity_error(rng):
    cfg = _mini_config(max_seq_len=2)
    cache = KvCache(cfg)
    q = rng.normal(size=(3, 8)).astype(np.float32)
    with pytest.raises(CapacityError):
        attention_step(q, q, q, cache, 0, AttentionMask.causal(3, 0))


def test_attention_mask_shape_checked(rng):
    cfg = _mini_config()
    cache = KvCache(cfg)
    q = rng.normal(size=(2, 8)).astype(np.float32)
    with pytest.raises(ShapeError):
        attention_step(q, q, q, cache, 0, AttentionMask.causal(1, 0))


def test_masked_positions_contribute_nothing(rng):
    # zeroing V rows at masked-away positions never changes the output
    cfg = _mini_config()
    q = rng.normal(size=(1, 8)).astype(np.float32)
    k = rng.normal(size=(4, 8)).astype(np.float32)
    v = rng.normal(size=(4, 8)).astype(np.float32)
    mask = np.array([[0.0, -1e9, 0.0, -1e9]], np.float32)

    def run(vv):
        cache = KvCache(cfg)
        attention_step(np.repeat(q, 3, 0), k[:3], vv[:3], cache, 0,
                       AttentionMask.causal(3, 0))
        return attention_step(q, k[3:], vv[3:], cache, 0, AttentionMask(mask))

    v_zeroed = v.copy()
    v_zeroed[1] = 0.0
    v_zeroed[3] = 0.0
    assert np.array_equal(run(v), run(v_zeroed))


# -- forward / cache ---------------------------------------------------------


def test_forward_logits_shape(weights):
    cache = KvCache(weights.config)
    logits = forward(weights, [1], cache, AttentionMask.causal(1, 0))
    assert logits.shape == (1, weights.config.vocab_size)


def test_prefill_equals_incremental_decode(weights):
    tokens = [1, 5, 9, 2, 7, 3]
    full = DecodeSession(weights).prefill(tokens)
    sess = DecodeSession(weights)
    last = None
    for t in tokens:
        last = sess.forward([t], AttentionMask.causal(1, sess.cache.fill_count))
    assert np.max(np.abs(last[0] - full[-1])) <= 1e-5


def test_prefill_equals_incremental_at_larger_size():
    spec = tiny_spec(embed_dim=64, num_heads=4, latent_dim=64, num_layers=4,
                     mlp_hidden=128, vocab_size=128, max_seq_len=64, seed=9)
    weights = build_toy_weights(spec)
    tokens = list(np.random.default_rng(0).integers(0, 128, size=32))
    full = DecodeSession(weights).prefill([int(t) for t in tokens])
    sess = DecodeSession(weights)
    rows = [sess.forward([int(t)], AttentionMask.causal(1, sess.cache.fill_count))[0]
            for t in tokens]
    assert np.max(np.abs(np.vstack(rows) - full)) <= 1e-5


def test_injection_rows_bypass_embedding(weights, rng):
    tokens = [1, 2, 3]
    base = DecodeSession(weights).prefill(tokens)
    inj = {1: rng.normal(0, 0.02, weights.config.embed_dim).astype(np.float32)}
    got = forward(weights, [1, -1, 3], KvCache(weights.config),
                  AttentionMask.causal(3, 0), injections=inj)
    # row 0 cannot see row 1 under the causal mask: unchanged
    assert np.max(np.abs(got[0] - base[0])) <= 1e-6
    # the injected row differs
    assert np.max(np.abs(got[1] - base[1])) > 1e-4


def test_invalid_token_id_rejected(weights):
    with pytest.raises(ShapeError):
        forward(weights, [999], KvCache(weights.config), AttentionMask.causal(1, 0))


def test_k_layouts_agree(weights):
    tokens = [4, 8, 15, 16, 23, 42]
    plain = DecodeSession(weights, layout="k_plain").prefill(tokens)
    transposed = DecodeSession(weights, layout="k_transposed").prefill(tokens)
    assert np.max(np.abs(plain - transposed)) <= 1e-6


def test_weights_are_frozen(weights):
    with pytest.raises(ValueError):
        weights.layers[0].wq[0, 0] = 1.0
    with pytest.raises(ValueError):
        weights.token_embedding[0, 0] = 1.0


def test_layer_step_matches_forward_layer(weights, rng):
    # the pure-function layer is the unit the graph interpreter is checked
    # against; it must agree with the cached forward
    cfg = weights.config
    tokens = [1, 2, 3, 4]
    cache = KvCache(cfg)
    forward(weights, tokens, cache, AttentionMask.causal(4, 0))
    x = weights.token_embedding[tokens]
    mask = AttentionMask.causal(4, 0)
    y, k_new, v_new = layer_step(weights.layers[0], cfg, x, None, None,
                                 np.arange(4), mask)
    assert np.array_equal(k_new, cache.k_rows(0, list(range(4))))
    assert np.array_equal(v_new, cache.v_view(0, 4))


def test_cache_segments_validated(weights):
    cache = KvCache(weights.config)
    cache.advance_to(10)
    cache.set_segments([("prefill", 0, 4), ("s0", 4, 3), ("s1", 7, 3)])
    assert cache.segment("s1") == (7, 3)
    with pytest.raises(ShapeError):
        cache.set_segments([("prefill", 0, 4), ("s0", 5, 5)])  # gap
    with pytest.raises(ShapeError):
        cache.set_segments([("prefill", 0, 4)])  # does not cover fill


def test_cache_keep_rows_compacts(weights, rng):
    cfg = weights.config
    cache = KvCache(cfg)
    k = rng.normal(size=(6, cfg.latent_dim)).astype(np.float32)
    v = rng.normal(size=(6, cfg.latent_dim)).astype(np.float32)
    for layer in range(cfg.num_layers):
        cache.put(layer, np.arange(6), k, v)
    cache.advance_to(6)
    cache.keep_rows([2, 5], base=1)
    assert cache.fill_count == 3
    assert np.array_equal(cache.k_rows(0, [1, 2]), k[[2, 5]])
    assert np.array_equal(cache.v_view(0, 3)[1:], v[[2, 5]])


def test_greedy_decode_forced_first(weights):
    out = greedy_decode(weights, [1, 2, 3], 5, forced_first=7)
    assert out[0] == 7 and len(out) == 5


def test_session_is_single_stream_over_shared_weights(weights):
    a, b = DecodeSession(weights), DecodeSession(weights)
    assert a.weights is b.weights
    a.prefill([1, 2])
    assert b.cache.fill_count == 0
