"""Canonical decoder-layer graph template.

One template covers the whole rewrite surface: fused multi-head attention
(split_heads + batched matmuls), SwiGLU MLP, optional low-rank adapter
application (whole-matrix or head-split form), and either K-cache layout.

Inputs: x (n,E), cache_k (t,L) or (L,t), cache_v (t,L), mask (n,t+n),
positions (n,).  Outputs: hidden (n,E), the step's K rows (store
orientation), and V rows.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import GraphError
from ..model import K_PLAIN, LayerWeights, ModelConfig
from .ir import Graph

ADAPTER_COMPOSITE = "composite"
ADAPTER_SPLIT = "split"


def _adapter_delta_qkv(g, x_id, a_id, b_arr, name, heads, form):
    """s*(xA)B for a q/k/v site; returns the (n, L) delta node id (unscaled)."""
    low = g.add("matmul", [x_id, a_id], id=f"{name}_low")
    if form == ADAPTER_COMPOSITE:
        b_id = g.add_const(f"{name}_b", b_arr)
        return g.add("matmul", [low, b_id], id=f"{name}_delta")
    hd = b_arr.shape[1] // heads
    parts = []
    for h in range(heads):
        b_h = g.add_const(f"{name}_b_h{h}", b_arr[:, h * hd:(h + 1) * hd])
        parts.append(g.add("matmul", [low, b_h], id=f"{name}_delta_h{h}"))
    return g.add("concat_heads", parts, id=f"{name}_delta")


def _adapter_delta_o(g, x_id, a_arr, b_id, name, heads, form):
    """s*(xA)B for the output site; A (L,d) may be applied head-split."""
    if form == ADAPTER_COMPOSITE:
        a_id = g.add_const(f"{name}_a", a_arr)
        low = g.add("matmul", [x_id, a_id], id=f"{name}_low")
    else:
        hd = a_arr.shape[0] // heads
        low = None
        for h in range(heads):
            a_h = g.add_const(f"{name}_a_h{h}", a_arr[h * hd:(h + 1) * hd, :])
            x_h = g.add("slice", [x_id],
                        {"axis": 1, "start": h * hd, "stop": (h + 1) * hd},
                        id=f"{name}_x_h{h}")
            part = g.add("matmul", [x_h, a_h], id=f"{name}_low_h{h}")
            low = part if low is None else g.add("add", [low, part],
                                                 id=f"{name}_low_sum{h}")
    return g.add("matmul", [low, b_id], id=f"{name}_delta")


def build_decoder_graph(lw: LayerWeights, cfg: ModelConfig, n: int, t: int, *,
                        adapter=None, adapter_layer: int = 0,
                        adapter_form: str = ADAPTER_COMPOSITE,
                        k_layout: str = K_PLAIN) -> Graph:
    if adapter_form not in (ADAPTER_COMPOSITE, ADAPTER_SPLIT):
        raise GraphError(f"unknown adapter form {adapter_form!r}")
    e, l, h, hd = cfg.embed_dim, cfg.latent_dim, cfg.num_heads, cfg.head_dim
    cols = t + n
    g = Graph()
    g.meta.update({"k_layout": k_layout, "heads": h, "head_dim": hd})

    x = g.add_input("x", (n, e))
    cache_k = g.add_input("cache_k", (t, l) if k_layout == K_PLAIN else (l, t))
    cache_v = g.add_input("cache_v", (t, l))
    mask = g.add_input("mask", (n, cols))
    positions = g.add_input("positions", (n,))

    c = {name: g.add_const(name, getattr(lw, name))
         for name in ("attn_gain", "wq", "wk", "wv", "wo",
                      "mlp_gain", "w_up", "w_gate", "w_down")}
    rope_attrs = {"head_dim": hd, "theta": cfg.rope_theta}

    attn_norm = g.add("rmsnorm", [x, c["attn_gain"]], {"eps": cfg.rms_eps},
                      id="attn_norm")

    def projection(site, w_id):
        lin = g.add("matmul", [attn_norm, w_id], id=f"{site}_lin")
        if adapter is None:
            return lin
        ll = adapter.layers[adapter_layer]
        a_arr = getattr(ll, f"a_{site}")
        b_arr = getattr(ll, f"b_{site}")
        a_id = g.add_const(f"{site}_lora_a", a_arr)
        delta = _adapter_delta_qkv(g, attn_norm, a_id, b_arr, f"{site}_lora",
                                   h, adapter_form)
        scaled = g.add("mul_scalar", [delta], {"value": float(adapter.scale)},
                       id=f"{site}_lora_scaled")
        return g.add("add", [lin, scaled], id=f"{site}_adapted")

    q_proj = projection("q", c["wq"])
    k_proj = projection("k", c["wk"])
    v_rows = projection("v", c["wv"])
    q_rot = g.add("rope", [q_proj, positions], rope_attrs, id="q_rot")
    k_rows = g.add("rope", [k_proj, positions], rope_attrs, id="k_rows")

    q_heads = g.add("split_heads", [q_rot], {"heads": h}, id="q_heads")
    if k_layout == K_PLAIN:
        k_seq = g.add("concat", [cache_k, k_rows], {"axis": 0}, id="k_seq")
        k_heads = g.add("split_heads", [k_seq], {"heads": h}, id="k_heads")
        k_right = g.add("transpose", [k_heads], {"perm": (0, 2, 1)}, id="k_heads_t")
        k_store = k_rows
    else:
        k_store = g.add("transpose", [k_rows], {"perm": (1, 0)}, id="k_store")
        k_seq = g.add("concat", [cache_k, k_store], {"axis": 1}, id="k_seq_t")
        k_right = g.add("reshape", [k_seq], {"shape": (h, hd, cols)}, id="k_heads_t")
    v_seq = g.add("concat", [cache_v, v_rows], {"axis": 0}, id="v_seq")
    v_heads = g.add("split_heads", [v_seq], {"heads": h}, id="v_heads")

    scores = g.add("matmul", [q_heads, k_right], id="scores")
    scaled = g.add("mul_scalar", [scores], {"value": 1.0 / math.sqrt(hd)},
                   id="scores_scaled")
    masked = g.add("add", [scaled, mask], id="scores_masked")
    probs = g.add("softmax", [masked], id="probs")
    ctx = g.add("matmul", [probs, v_heads], id="ctx")
    attn_flat = g.add("concat_heads", [ctx], id="attn_flat")
    attn_out = g.add("matmul", [attn_flat, c["wo"]], id="attn_out")
    if adapter is not None:
        ll = adapter.layers[adapter_layer]
        b_id = g.add_const("o_lora_b", ll.b_o)
        delta = _adapter_delta_o(g, attn_flat, ll.a_o, b_id, "o_lora", h,
                                 adapter_form)
        scaled_d = g.add("mul_scalar", [delta], {"value": float(adapter.scale)},
                         id="o_lora_scaled")
        attn_out = g.add("add", [attn_out, scaled_d], id="o_adapted")

    resid1 = g.add("add", [x, attn_out], id="resid1")
    mlp_norm = g.add("rmsnorm", [resid1, c["mlp_gain"]], {"eps": cfg.rms_eps},
                     id="mlp_norm")
    up = g.add("matmul", [mlp_norm, c["w_up"]], id="up")
    gate = g.add("matmul", [mlp_norm, c["w_gate"]], id="gate")
    gate_act = g.add("silu", [gate], id="gate_act")
    gated = g.add("mul", [gate_act, up], id="gated")
    mlp_out = g.add("matmul", [gated, c["w_down"]], id="mlp_out")
    out = g.add("add", [resid1, mlp_out], id="out")

    g.outputs = [out, k_store, v_rows]
    return g


def layer_feeds(cfg: ModelConfig, n: int, t: int, rng, *, k_layout=K_PLAIN,
                causal=True):
    """Random feeds for the template (mask is a real visibility mask)."""
    from ..model import NEG

    mask = np.full((n, t + n), NEG, dtype=np.float32)
    if causal:
        for i in range(n):
            mask[i, : t + i + 1] = 0.0
    else:
        mask[:] = 0.0
    ck = rng.normal(0, 0.5, (t, cfg.latent_dim)).astype(np.float32)
    feeds = {
        "x": rng.normal(0, 0.5, (n, cfg.embed_dim)).astype(np.float32),
        "cache_k": ck if k_layout == K_PLAIN else np.ascontiguousarray(ck.T),
        "cache_v": rng.normal(0, 0.5, (t, cfg.latent_dim)).astype(np.float32),
        "mask": mask,
        "positions": np.arange(t, t + n, dtype=np.int64),
    }
    return feeds
