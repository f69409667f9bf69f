"""Graph rewrites over the decoder-layer template.

Every pass is a pure function Graph -> Graph and must preserve evaluation
results; :func:`check_equivalence` is the oracle used by the tests.  When a
pass cannot find its pattern it returns the graph unchanged and records a
diagnostic in ``graph.meta["diagnostics"]``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from ..errors import GraphError
from ..model import K_PLAIN, K_TRANSPOSED
from .ir import Graph, _eval_op

# kinds a scalar multiply commutes through, toward a foldable constant
_SCALAR_COMMUTES = ("rope", "split_heads", "transpose", "reshape", "slice")


# -- constant folding ----------------------------------------------------------


def _fold_all_const_nodes(g: Graph) -> bool:
    changed = False
    for nid in g.topo_order():
        node = g.nodes.get(nid)
        if node is None:
            continue
        if all(ref in g.constants for ref in node.inputs):
            value = _eval_op(node.kind, [g.constants[r] for r in node.inputs],
                             node.attrs)
            cid = g.fresh_id(f"{nid}_const")
            g.constants[cid] = value
            del g.nodes[nid]
            g.rewire(nid, cid)
            changed = True
    return changed


def _fold_one_scalar(g: Graph) -> bool:
    for nid, node in list(g.nodes.items()):
        if node.kind != "mul_scalar":
            continue
        s = float(node.attrs["value"])
        prev, cur = nid, node.inputs[0]
        folded = False
        while cur in g.nodes:
            # every node the scalar moves past must feed only this chain,
            # otherwise the fold would change other consumers
            if g.consumers(cur) != [prev] or cur in g.outputs:
                break
            sub = g.nodes[cur]
            if sub.kind in ("matmul", "conv1x1"):
                const_idx = [i for i, r in enumerate(sub.inputs) if r in g.constants]
                if const_idx:
                    i = const_idx[-1]
                    cid = g.fresh_id(f"{sub.inputs[i]}_scaled")
                    g.constants[cid] = g.constants[sub.inputs[i]] * np.float32(s)
                    sub.inputs[i] = cid
                    folded = True
                    break
                prev, cur = cur, sub.inputs[0]
            elif sub.kind in _SCALAR_COMMUTES:
                prev, cur = cur, sub.inputs[0]
            else:
                break
        if folded:
            src = node.inputs[0]
            del g.nodes[nid]
            g.rewire(nid, src)
            return True
    return False


def pass_constant_fold(g: Graph) -> Graph:
    """Evaluate all-constant subgraphs once; fold scalar multiplies into the
    nearest constant matrix they commute to (e.g. attention 1/sqrt(hd) into
    the query projection)."""
    g = g.copy()
    while True:
        if _fold_all_const_nodes(g):
            continue
        if _fold_one_scalar(g):
            continue
        break
    return g.prune()


# -- linear -> 1x1 convolution ---------------------------------------------------


def pass_linear_to_conv(g: Graph) -> Graph:
    """Rewrite 2-D matmuls with a constant right operand as 1x1 convolutions
    (kernel = W^T as out x in x 1 x 1, reshapes around it)."""
    g = g.copy()
    for nid, node in list(g.nodes.items()):
        if node.kind != "matmul" or len(node.out_shape) != 2:
            continue
        x_ref, w_ref = node.inputs
        if w_ref not in g.constants:
            continue
        w = g.constants[w_ref]
        ci, co = w.shape
        m = g.shape_of(x_ref)[0]
        kern = g.fresh_id(f"{w_ref}_kern")
        g.constants[kern] = np.ascontiguousarray(w.T).reshape(co, ci, 1, 1)
        rs_in = g.add("reshape", [x_ref], {"shape": (m, 1, 1, ci)},
                      id=g.fresh_id(f"{nid}_nhwc"))
        conv = g.add("conv1x1", [rs_in, kern], id=g.fresh_id(f"{nid}_conv"))
        rs_out = g.add("reshape", [conv], {"shape": (m, co)},
                       id=g.fresh_id(f"{nid}_flat"))
        del g.nodes[nid]
        g.rewire(nid, rs_out)
    return g.prune()


# -- operator fusion ------------------------------------------------------------


def pass_fuse(g: Graph) -> Graph:
    """Merge matmul/conv1x1 + following activation (or constant bias add)
    into one fused node recording the original kinds in order."""
    g = g.copy()
    changed = True
    while changed:
        changed = False
        for nid, node in list(g.nodes.items()):
            if node.kind not in ("matmul", "conv1x1"):
                continue
            cons = g.consumers(nid)
            if len(cons) != 1 or nid in g.outputs:
                continue
            nxt = g.nodes[cons[0]]
            if nxt.kind == "silu":
                kinds = [node.kind, "silu"]
                extra = []
                part_attrs = [node.attrs, {}]
            elif nxt.kind == "add":
                other = [r for r in nxt.inputs if r != nid]
                if len(other) != 1 or other[0] not in g.constants:
                    continue
                kinds = [node.kind, "add"]
                extra = other
                part_attrs = [node.attrs, {}]
            else:
                continue
            fid = g.fresh_id(f"{nid}_{kinds[1]}")
            g.nodes[fid] = type(node)(
                fid, "fused", node.inputs + extra,
                {"kinds": kinds, "attrs_list": part_attrs}, nxt.out_shape)
            del g.nodes[nid]
            del g.nodes[nxt.id]
            g.rewire(nxt.id, fid)
            changed = True
            break
    return g.prune()


# -- MHA -> per-head attention -----------------------------------------------------


def _match_projection(g: Graph, ref):
    """Recognize x @ W (matmul or conv-wrapped); returns (x_ref, W array)."""
    node = g.nodes.get(ref)
    if node is None:
        return None
    if node.kind == "matmul" and node.inputs[1] in g.constants:
        return node.inputs[0], g.constants[node.inputs[1]]
    if node.kind == "reshape":
        conv = g.nodes.get(node.inputs[0])
        if conv is None or conv.kind != "conv1x1":
            return None
        kern = g.constants.get(conv.inputs[1])
        rs_in = g.nodes.get(conv.inputs[0])
        if kern is None or rs_in is None or rs_in.kind != "reshape":
            return None
        co, ci = kern.shape[0], kern.shape[1]
        return rs_in.inputs[0], np.ascontiguousarray(kern.reshape(co, ci).T)
    return None


def _match_mha(g: Graph):
    """Locate the fused-head attention chain; returns a dict of pieces."""
    for ch_id, ch in g.nodes.items():
        if ch.kind != "concat_heads" or len(ch.inputs) != 1:
            continue
        ctx = g.nodes.get(ch.inputs[0])
        if ctx is None or ctx.kind != "matmul" or len(ctx.out_shape) != 3:
            continue
        probs = g.nodes.get(ctx.inputs[0])
        v_heads = g.nodes.get(ctx.inputs[1])
        if probs is None or probs.kind != "softmax":
            continue
        if v_heads is None or v_heads.kind != "split_heads":
            continue
        masked = g.nodes.get(probs.inputs[0])
        if masked is None or masked.kind != "add":
            continue
        score_ref = next((r for r in masked.inputs
                          if r in g.nodes and len(g.nodes[r].out_shape) == 3), None)
        if score_ref is None:
            continue
        mask_ref = next(r for r in masked.inputs if r != score_ref)
        scale = None
        scores = g.nodes[score_ref]
        if scores.kind == "mul_scalar":
            scale = float(scores.attrs["value"])
            scores = g.nodes.get(scores.inputs[0])
            if scores is None:
                continue
        if scores.kind != "matmul":
            continue
        q_heads = g.nodes.get(scores.inputs[0])
        k_right = g.nodes.get(scores.inputs[1])
        if q_heads is None or q_heads.kind != "split_heads" or k_right is None:
            continue

        q_rot = g.nodes.get(q_heads.inputs[0])
        if q_rot is None or q_rot.kind != "rope":
            continue
        q_proj = _match_projection(g, q_rot.inputs[0])
        if q_proj is None:
            continue

        layout = g.meta.get("k_layout", K_PLAIN)
        if layout == K_PLAIN:
            if k_right.kind != "transpose":
                continue
            k_heads = g.nodes.get(k_right.inputs[0])
            if k_heads is None or k_heads.kind != "split_heads":
                continue
            k_seq = g.nodes.get(k_heads.inputs[0])
        else:
            if k_right.kind != "reshape":
                continue
            k_seq = g.nodes.get(k_right.inputs[0])
        if k_seq is None or k_seq.kind != "concat":
            continue
        cache_k_ref, k_new_ref = k_seq.inputs
        if layout == K_TRANSPOSED:
            k_store = g.nodes.get(k_new_ref)
            if k_store is None or k_store.kind != "transpose":
                continue
            k_rot_ref = k_store.inputs[0]
        else:
            k_rot_ref = k_new_ref
        k_rot = g.nodes.get(k_rot_ref)
        if k_rot is None or k_rot.kind != "rope":
            continue
        k_proj = _match_projection(g, k_rot.inputs[0])
        if k_proj is None:
            continue

        v_seq = g.nodes.get(v_heads.inputs[0])
        if v_seq is None or v_seq.kind != "concat":
            continue
        cache_v_ref, v_new_ref = v_seq.inputs
        v_proj = _match_projection(g, v_new_ref)
        if v_proj is None:
            continue

        return {
            "concat_heads": ch_id, "mask": mask_ref, "scale": scale,
            "rope_attrs": q_rot.attrs, "positions": q_rot.inputs[1],
            "q_src": q_proj[0], "wq": q_proj[1], "wk": k_proj[1],
            "wv": v_proj[1], "cache_k": cache_k_ref, "cache_v": cache_v_ref,
            "k_new": k_new_ref, "v_new": v_new_ref, "layout": layout,
        }
    return None


def pass_mha_to_sha(g: Graph) -> Graph:
    """Decompose fused multi-head attention into independent per-head chains
    with sliced projection constants, concatenated at the end."""
    out = g.copy()
    heads = out.meta.get("heads", 1)
    if heads == 1:
        out.diagnostics().append("mha_to_sha: single head, nothing to decompose")
        return out
    m = _match_mha(out)
    if m is None:
        out.diagnostics().append("mha_to_sha: attention pattern not found")
        return out
    hd = out.meta["head_dim"]
    layout = m["layout"]
    x_ref = m["q_src"]
    ctx_parts, k_parts, v_parts = [], [], []
    for h in range(heads):
        lo, hi = h * hd, (h + 1) * hd
        wq_h = out.fresh_id(f"wq_h{h}")
        wk_h = out.fresh_id(f"wk_h{h}")
        wv_h = out.fresh_id(f"wv_h{h}")
        out.constants[wq_h] = np.ascontiguousarray(m["wq"][:, lo:hi])
        out.constants[wk_h] = np.ascontiguousarray(m["wk"][:, lo:hi])
        out.constants[wv_h] = np.ascontiguousarray(m["wv"][:, lo:hi])
        q_h = out.add("rope", [out.add("matmul", [x_ref, wq_h]), m["positions"]],
                      m["rope_attrs"])
        k_h = out.add("rope", [out.add("matmul", [x_ref, wk_h]), m["positions"]],
                      m["rope_attrs"])
        v_h = out.add("matmul", [x_ref, wv_h])
        if layout == K_PLAIN:
            kc_h = out.add("slice", [m["cache_k"]],
                           {"axis": 1, "start": lo, "stop": hi})
            k_seq_h = out.add("concat", [kc_h, k_h], {"axis": 0})
            k_t_h = out.add("transpose", [k_seq_h], {"perm": (1, 0)})
        else:
            kc_h = out.add("slice", [m["cache_k"]],
                           {"axis": 0, "start": lo, "stop": hi})
            k_t_h = out.add("concat",
                            [kc_h, out.add("transpose", [k_h], {"perm": (1, 0)})],
                            {"axis": 1})
        s_h = out.add("matmul", [q_h, k_t_h])
        if m["scale"] is not None:
            s_h = out.add("mul_scalar", [s_h], {"value": m["scale"]})
        p_h = out.add("softmax", [out.add("add", [s_h, m["mask"]])])
        vc_h = out.add("slice", [m["cache_v"]], {"axis": 1, "start": lo, "stop": hi})
        v_seq_h = out.add("concat", [vc_h, v_h], {"axis": 0})
        ctx_parts.append(out.add("matmul", [p_h, v_seq_h]))
        k_parts.append(k_h)
        v_parts.append(v_h)
    new_attn = out.add("concat_heads", ctx_parts, id=out.fresh_id("attn_sha"))
    out.rewire(m["concat_heads"], new_attn)
    # the step's stored K/V rows come from the per-head chains too, so the
    # fat projections disappear entirely
    new_v = out.add("concat_heads", v_parts, id=out.fresh_id("v_rows_sha"))
    out.rewire(m["v_new"], new_v)
    if layout == K_PLAIN:
        new_k = out.add("concat_heads", k_parts, id=out.fresh_id("k_rows_sha"))
    else:
        cat = out.add("concat_heads", k_parts)
        new_k = out.add("transpose", [cat], {"perm": (1, 0)},
                        id=out.fresh_id("k_store_sha"))
    out.rewire(m["k_new"], new_k)
    return out.prune()


# -- K-cache layout -----------------------------------------------------------------


def pass_k_layout(g: Graph, layout: str) -> Graph:
    """Switch K-cache storage between row-major and transposed, rewriting the
    read/write nodes and the score matmul accordingly."""
    if layout not in (K_PLAIN, K_TRANSPOSED):
        raise GraphError(f"unknown layout {layout!r}")
    out = g.copy()
    if out.meta.get("k_layout") == layout:
        return out
    m = _match_mha(out)
    if m is None:
        out.diagnostics().append("k_layout: attention pattern not found")
        return out
    heads, hd = out.meta["heads"], out.meta["head_dim"]
    cache_k = m["cache_k"]
    t_len = out.input_shapes[cache_k][0 if m["layout"] == K_PLAIN else 1]
    l_dim = heads * hd
    k_seq_id = out.consumers(cache_k)[0]
    k_seq = out.nodes[k_seq_id]
    cols = t_len + out.shape_of(m["v_new"])[0]

    if layout == K_TRANSPOSED:
        out.input_shapes[cache_k] = (l_dim, t_len)
        k_rot_ref = m["k_new"]
        k_store = out.add("transpose", [k_rot_ref], {"perm": (1, 0)},
                          id=out.fresh_id("k_store"))
        k_seq.inputs = [cache_k, k_store]
        k_seq.attrs = {"axis": 1}
        k_seq.out_shape = (l_dim, cols)
        # split_heads + transpose pair becomes a plain reshape
        k_heads_id = out.consumers(k_seq_id)[0]
        k_right_id = out.consumers(k_heads_id)[0]
        reshaped = out.add("reshape", [k_seq_id], {"shape": (heads, hd, cols)},
                           id=out.fresh_id("k_heads_t"))
        del out.nodes[k_heads_id]
        out.rewire(k_right_id, reshaped)
        del out.nodes[k_right_id]
        out.outputs = [k_store if o == k_rot_ref else o for o in out.outputs]
    else:
        out.input_shapes[cache_k] = (t_len, l_dim)
        k_store_id = m["k_new"]
        k_rot_ref = out.nodes[k_store_id].inputs[0]
        k_seq.inputs = [cache_k, k_rot_ref]
        k_seq.attrs = {"axis": 0}
        k_seq.out_shape = (cols, l_dim)
        k_right_id = out.consumers(k_seq_id)[0]  # the reshape
        k_heads = out.add("split_heads", [k_seq_id], {"heads": heads},
                          id=out.fresh_id("k_heads"))
        k_t = out.add("transpose", [k_heads], {"perm": (0, 2, 1)},
                      id=out.fresh_id("k_heads_t"))
        out.rewire(k_right_id, k_t)
        del out.nodes[k_right_id]
        del out.nodes[k_store_id]
        out.outputs = [k_rot_ref if o == k_store_id else o for o in out.outputs]
    out.meta["k_layout"] = layout
    return out.prune()


# -- accounting -----------------------------------------------------------------------


def _node_macs(g: Graph, node) -> int:
    if node.kind == "matmul":
        a = g.shape_of(node.inputs[0])
        b = g.shape_of(node.inputs[1])
        if len(a) == 2:
            return a[0] * a[1] * b[1]
        return a[0] * a[1] * a[2] * b[2]
    if node.kind == "conv1x1":
        x = g.shape_of(node.inputs[0])
        k = g.shape_of(node.inputs[1])
        return x[0] * k[1] * k[0]
    if node.kind == "fused":
        first = node.attrs["kinds"][0]
        if first == "matmul":
            a = g.shape_of(node.inputs[0])
            b = g.shape_of(node.inputs[1])
            return (a[0] * a[1] * b[1] if len(a) == 2
                    else a[0] * a[1] * a[2] * b[2])
        if first == "conv1x1":
            x = g.shape_of(node.inputs[0])
            k = g.shape_of(node.inputs[1])
            return x[0] * k[1] * k[0]
    return 0


@dataclass
class GraphStats:
    node_counts: dict
    n_nodes: int
    const_bytes: int
    macs: int

    def to_dict(self):
        return {"node_counts": dict(self.node_counts), "n_nodes": self.n_nodes,
                "const_bytes": self.const_bytes, "macs": self.macs}


def graph_stats(g: Graph) -> GraphStats:
    counts = Counter(n.kind for n in g.nodes.values())
    return GraphStats(
        node_counts=dict(counts), n_nodes=len(g.nodes),
        const_bytes=sum(a.nbytes for a in g.constants.values()),
        macs=sum(_node_macs(g, n) for n in g.nodes.values()),
    )


@dataclass
class PassReport:
    before: GraphStats
    after: GraphStats

    def to_dict(self):
        return {"before": self.before.to_dict(), "after": self.after.to_dict()}


def pass_report(g_before: Graph, g_after: Graph) -> PassReport:
    return PassReport(before=graph_stats(g_before), after=graph_stats(g_after))


# -- equivalence oracle ------------------------------------------------------------------


def adapt_feeds(feeds: dict, src_layout: str, dst_layout: str) -> dict:
    if src_layout == dst_layout:
        return feeds
    out = dict(feeds)
    out["cache_k"] = np.ascontiguousarray(np.asarray(feeds["cache_k"]).T)
    return out


def _orient_outputs(g: Graph, results: dict) -> list[np.ndarray]:
    """Outputs in template order, with K rows in sequence orientation."""
    vals = [results[o] for o in g.outputs]
    if g.meta.get("k_layout") == K_TRANSPOSED and len(vals) == 3:
        vals[1] = vals[1].T
    return vals


def check_equivalence(g_ref: Graph, g_test: Graph, feeds_list, tol=1e-6):
    """Max abs output difference across feeds; raises GraphError above tol."""
    from .ir import evaluate

    worst = 0.0
    ref_layout = g_ref.meta.get("k_layout", K_PLAIN)
    test_layout = g_test.meta.get("k_layout", K_PLAIN)
    for feeds in feeds_list:
        r = _orient_outputs(g_ref, evaluate(g_ref, feeds))
        t = _orient_outputs(
            g_test, evaluate(g_test, adapt_feeds(feeds, ref_layout, test_layout)))
        if len(r) != len(t):
            raise GraphError("output arity changed")
        for a, b in zip(r, t):
            worst = max(worst, float(np.max(np.abs(a - b))) if a.size else 0.0)
    if worst > tol:
        raise GraphError(f"outputs diverge: max abs diff {worst} > {tol}")
    return worst


PASSES = {
    "sha": pass_mha_to_sha,
    "conv": pass_linear_to_conv,
    "fold": pass_constant_fold,
    "fuse": pass_fuse,
}
