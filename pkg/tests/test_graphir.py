import itertools

import numpy as np
import pytest

from desklm import graphir
from desklm.errors import GraphError, MissingFeedError
from desklm.graphir import Graph, evaluate
from desklm.model import layer_step
from desklm.toygen import build_toy_adapters, build_toy_weights

from conftest import tiny_spec

SPEC = tiny_spec(embed_dim=8, num_heads=4, latent_dim=16, num_layers=1,
                 mlp_hidden=16, vocab_size=32, max_seq_len=64, n_adapters=1,
                 rank=2)
WEIGHTS = build_toy_weights(SPEC)
ADAPTER = build_toy_adapters(SPEC)[0]
CFG = WEIGHTS.config
N, T = 3, 5


def _graph(**kw):
    return graphir.build_decoder_graph(WEIGHTS.layers[0], CFG, N, T, **kw)


def _feeds(count, seed=0, k_layout="k_plain"):
    rng = np.random.default_rng(seed)
    return [graphir.layer_feeds(CFG, N, T, rng, k_layout=k_layout)
            for _ in range(count)]


# -- interpreter ----------------------------------------------------------------


def test_single_matmul_identity():
    g = Graph()
    g.add_input("x", (2, 3))
    g.add_const("w", np.eye(3, dtype=np.float32))
    nid = g.add("matmul", ["x", "w"])
    g.outputs = [nid]
    x = np.arange(6, dtype=np.float32).reshape(2, 3)
    assert np.array_equal(evaluate(g, {"x": x})[nid], x)


def test_missing_feed_raises():
    g = Graph()
    g.add_input("x", (1, 1))
    g.outputs = []
    with pytest.raises(MissingFeedError):
        evaluate(g, {})


def test_cycle_detected():
    g = _graph()
    g.nodes["attn_norm"].inputs[0] = "out"  # x -> out creates a loop
    with pytest.raises(GraphError):
        evaluate(g, _feeds(1)[0])


def test_shape_conformance_checked():
    g = Graph()
    g.add_input("x", (2, 3))
    g.add_const("w", np.zeros((4, 5), np.float32))
    with pytest.raises(GraphError):
        g.add("matmul", ["x", "w"])


def test_decoder_graph_matches_runtime_layer():
    g = _graph()
    feeds = _feeds(5, seed=3)
    worst = 0.0
    for f in feeds:
        res = evaluate(g, f)
        y, k, v = layer_step(WEIGHTS.layers[0], CFG, f["x"], f["cache_k"],
                             f["cache_v"], f["positions"], f["mask"])
        for got, want in zip((res[o] for o in g.outputs), (y, k, v)):
            worst = max(worst, float(np.max(np.abs(got - want))))
    assert worst <= 1e-6


def test_evaluate_is_bit_stable():
    g = _graph()
    f = _feeds(1)[0]
    a = evaluate(g, f)
    b = evaluate(g, f)
    for o in g.outputs:
        assert np.array_equal(a[o], b[o])


# -- individual passes ------------------------------------------------------------


def test_sha_single_head_is_noop():
    spec1 = tiny_spec(embed_dim=8, num_heads=1, latent_dim=8, num_layers=1,
                      mlp_hidden=16, vocab_size=32, max_seq_len=64)
    w1 = build_toy_weights(spec1)
    g = graphir.build_decoder_graph(w1.layers[0], w1.config, N, T)
    g2 = graphir.pass_mha_to_sha(g)
    assert set(g2.nodes) == set(g.nodes)
    assert g2.meta["diagnostics"]


def test_sha_equivalent_and_sliced():
    g = _graph()
    g2 = graphir.pass_mha_to_sha(g)
    assert graphir.check_equivalence(g, g2, _feeds(50, seed=1)) <= 1e-6
    hd = CFG.head_dim
    for h in range(CFG.num_heads):
        got = g2.constants[f"wq_h{h}"]
        assert np.array_equal(got, WEIGHTS.layers[0].wq[:, h * hd:(h + 1) * hd])


def test_sha_grows_nodes_and_shrinks_dims():
    g = _graph()
    g2 = graphir.pass_mha_to_sha(g)
    assert len(g2.nodes) > len(g.nodes)
    hd = CFG.head_dim
    score_nodes = [n for n in g2.nodes.values()
                   if n.kind == "matmul" and n.out_shape == (N, T + N)
                   and g2.shape_of(n.inputs[0]) == (N, hd)]
    assert len(score_nodes) == CFG.num_heads


def test_sha_keeps_mac_total():
    g = _graph()
    rep = graphir.pass_report(g, graphir.pass_mha_to_sha(g))
    assert rep.before.macs == rep.after.macs
    # fat projections (3) become per-head ones (3 * H)
    before = rep.before.node_counts["matmul"]
    after = rep.after.node_counts["matmul"]
    assert after == before + 3 * (CFG.num_heads - 1) + (CFG.num_heads - 1) * 2


def test_conv_pass_equivalent_and_idempotent():
    g = _graph()
    g2 = graphir.pass_linear_to_conv(g)
    assert graphir.check_equivalence(g, g2, _feeds(50, seed=2)) <= 1e-6
    assert "conv1x1" in graphir.graph_stats(g2).node_counts
    assert not any(n.kind == "matmul" and len(n.out_shape) == 2
                   and n.inputs[1] in g2.constants for n in g2.nodes.values())
    g3 = graphir.pass_linear_to_conv(g2)
    assert graphir.graph_stats(g3).node_counts == graphir.graph_stats(g2).node_counts


def test_conv_identity_weight():
    g = Graph()
    g.add_input("x", (4, 6))
    g.add_const("w", np.eye(6, dtype=np.float32))
    nid = g.add("matmul", ["x", "w"])
    g.outputs = [nid]
    g2 = graphir.pass_linear_to_conv(g)
    x = np.random.default_rng(0).normal(size=(4, 6)).astype(np.float32)
    out = evaluate(g2, {"x": x})[g2.outputs[0]]
    assert np.allclose(out, x, atol=1e-7)


def test_conv_kernel_layout():
    g = Graph()
    g.add_input("x", (2, 3))
    w = np.arange(12, dtype=np.float32).reshape(3, 4)
    g.add_const("w", w)
    nid = g.add("matmul", ["x", "w"])
    g.outputs = [nid]
    g2 = graphir.pass_linear_to_conv(g)
    kern = next(a for name, a in g2.constants.items() if a.ndim == 4)
    assert kern.shape == (4, 3, 1, 1)
    assert np.array_equal(kern.reshape(4, 3), w.T)


def test_fold_two_constant_adds_become_one_constant():
    g = Graph()
    g.add_const("a", np.ones((2, 2), np.float32))
    g.add_const("b", 2 * np.ones((2, 2), np.float32))
    s1 = g.add("add", ["a", "b"])
    s2 = g.add("add", [s1, "a"])
    g.outputs = [s2]
    g2 = graphir.pass_constant_fold(g)
    assert not g2.nodes
    assert np.array_equal(g2.constants[g2.outputs[0]], 4 * np.ones((2, 2)))


def test_fold_merge_style_scaled_product():
    g = Graph()
    g.add_const("a", np.ones((3, 2), np.float32))
    g.add_const("b", np.ones((2, 3), np.float32))
    prod = g.add("matmul", ["a", "b"])
    scaled = g.add("mul_scalar", [prod], {"value": 0.5})
    g.outputs = [scaled]
    g2 = graphir.pass_constant_fold(g)
    assert not g2.nodes
    assert np.array_equal(g2.constants[g2.outputs[0]], np.ones((3, 3)))


def test_fold_pushes_attention_scale_into_projection():
    g = _graph()
    g2 = graphir.pass_constant_fold(g)
    assert graphir.check_equivalence(g, g2, _feeds(50, seed=4)) <= 1e-6
    assert not any(n.kind == "mul_scalar" for n in g2.nodes.values())
    assert len(g2.nodes) == len(g.nodes) - 1


def test_fold_leaves_constant_free_graph_alone():
    g = Graph()
    g.add_input("x", (2, 2))
    g.add_input("y", (2, 2))
    nid = g.add("add", ["x", "y"])
    g.outputs = [nid]
    assert len(graphir.pass_constant_fold(g).nodes) == 1


def test_fuse_equivalent_and_records_kinds():
    g = _graph()
    g2 = graphir.pass_fuse(g)
    assert graphir.check_equivalence(g, g2, _feeds(50, seed=5)) <= 1e-6
    fused = [n for n in g2.nodes.values() if n.kind == "fused"]
    assert len(fused) == 1
    assert fused[0].attrs["kinds"] == ["matmul", "silu"]


def test_fuse_no_adjacent_pair_is_noop():
    g = Graph()
    g.add_input("x", (2, 2))
    g.add_const("w", np.eye(2, dtype=np.float32))
    m = g.add("matmul", ["x", "w"])
    t = g.add("transpose", [m], {"perm": (1, 0)})
    g.outputs = [t]
    g2 = graphir.pass_fuse(g)
    assert graphir.graph_stats(g2).node_counts == graphir.graph_stats(g).node_counts


def test_k_layout_roundtrip_and_idempotence():
    g = _graph()
    feeds = _feeds(20, seed=6)
    gt = graphir.pass_k_layout(g, "k_transposed")
    assert gt.meta["k_layout"] == "k_transposed"
    assert graphir.check_equivalence(g, gt, feeds) <= 1e-6
    assert gt.input_shapes["cache_k"] == (CFG.latent_dim, T)
    k_out = gt.nodes[gt.outputs[1]]
    assert k_out.out_shape == (CFG.latent_dim, N)
    same = graphir.pass_k_layout(gt, "k_transposed")
    assert set(same.nodes) == set(gt.nodes)
    back = graphir.pass_k_layout(gt, "k_plain")
    assert graphir.check_equivalence(g, back, feeds) <= 1e-6


def test_pass_composition_all_orderings():
    g = _graph()
    feeds = _feeds(8, seed=7)
    for order in itertools.permutations(graphir.PASSES):
        g2 = g
        for name in order:
            g2 = graphir.PASSES[name](g2)
        assert graphir.check_equivalence(g, g2, feeds) <= 1e-6, order


def test_pass_report_identity():
    g = _graph()
    rep = graphir.pass_report(g, g.copy())
    assert rep.before.to_dict() == rep.after.to_dict()


def test_fold_never_adds_nonconstant_nodes():
    g = _graph()
    g2 = graphir.pass_constant_fold(g)
    assert len(g2.nodes) <= len(g.nodes)


# -- adapters in the template -------------------------------------------------------


def test_adapter_forms_are_equivalent():
    gc = _graph(adapter=ADAPTER, adapter_form=graphir.ADAPTER_COMPOSITE)
    gs = _graph(adapter=ADAPTER, adapter_form=graphir.ADAPTER_SPLIT)
    assert graphir.check_equivalence(gc, gs, _feeds(20, seed=8), tol=1e-5) <= 1e-5


def test_adapter_split_uses_per_head_constants():
    gs = _graph(adapter=ADAPTER, adapter_form=graphir.ADAPTER_SPLIT)
    assert any(name.startswith("q_lora_b_h") for name in gs.constants)


def test_adapter_graph_matches_merged_weights():
    from desklm.lora import merge_adapter

    merged = merge_adapter(WEIGHTS, ADAPTER)
    gc = _graph(adapter=ADAPTER)
    worst = 0.0
    for f in _feeds(5, seed=9):
        res = evaluate(gc, f)
        y, k, v = layer_step(merged.layers[0], CFG, f["x"], f["cache_k"],
                             f["cache_v"], f["positions"], f["mask"])
        for got, want in zip((res[o] for o in gc.outputs), (y, k, v)):
            worst = max(worst, float(np.max(np.abs(got - want))))
    assert worst <= 1e-5


# -- serialization ----------------------------------------------------------------------


def test_json_roundtrip_evaluates_identically(tmp_path):
    g = _graph()
    g.save(tmp_path / "g")
    g2 = Graph.load(tmp_path / "g")
    f = _feeds(1, seed=10)[0]
    a, b = evaluate(g, f), evaluate(g2, f)
    for o in g.outputs:
        assert np.array_equal(a[o], b[o])
