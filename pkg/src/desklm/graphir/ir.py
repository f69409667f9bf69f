"""Tensor-op graph for one decoder layer, plus a reference interpreter.

The IR is deliberately small: enough kinds to express the decoder-layer
template and every rewrite applied to it.  Graphs are immutable values in
spirit — passes copy, never mutate their input — and the interpreter is the
equivalence oracle: deterministic topological evaluation, float64
accumulation inside each op, float32 between ops.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .. import kernels
from ..errors import GraphError, MissingFeedError

# kind -> input arity (None = variadic)
OP_ARITY = {
    "matmul": 2, "conv1x1": 2, "add": 2, "mul": 2, "mul_scalar": 1,
    "rmsnorm": 2, "rope": 2, "softmax": 1, "silu": 1,
    "split_heads": 1, "concat_heads": None, "transpose": 1, "reshape": 1,
    "slice": 1, "concat": None, "fused": None,
}


class Node:
    __slots__ = ("id", "kind", "inputs", "attrs", "out_shape")

    def __init__(self, id, kind, inputs, attrs, out_shape):
        self.id = id
        self.kind = kind
        self.inputs = list(inputs)
        self.attrs = dict(attrs or {})
        self.out_shape = tuple(out_shape)

    def copy(self):
        return Node(self.id, self.kind, self.inputs, self.attrs, self.out_shape)

    def __repr__(self):
        return f"Node({self.id!r}, {self.kind}, in={self.inputs}, out={self.out_shape})"


def _broadcast(a, b):
    try:
        return np.broadcast_shapes(a, b)
    except ValueError as exc:
        raise GraphError(f"cannot broadcast {a} and {b}") from exc


def infer_shape(kind, in_shapes, attrs):
    if kind == "matmul":
        a, b = in_shapes
        if len(a) == 2 and len(b) == 2:
            if a[1] != b[0]:
                raise GraphError(f"matmul inner dims {a} x {b}")
            return (a[0], b[1])
        if len(a) == 3 and len(b) == 3:
            if a[0] != b[0] or a[2] != b[1]:
                raise GraphError(f"batched matmul dims {a} x {b}")
            return (a[0], a[1], b[2])
        raise GraphError(f"matmul rank mismatch {a} x {b}")
    if kind == "conv1x1":
        x, k = in_shapes
        if len(x) != 4 or x[1] != 1 or x[2] != 1:
            raise GraphError(f"conv1x1 input must be (n,1,1,ci), got {x}")
        if len(k) != 4 or k[2:] != (1, 1) or k[1] != x[3]:
            raise GraphError(f"conv1x1 kernel must be (co,{x[3]},1,1), got {k}")
        return (x[0], 1, 1, k[0])
    if kind in ("add", "mul"):
        return _broadcast(*in_shapes)
    if kind in ("mul_scalar", "softmax", "silu"):
        return in_shapes[0]
    if kind == "rmsnorm":
        x, gain = in_shapes
        if gain != (x[-1],):
            raise GraphError(f"rmsnorm gain {gain} vs rows {x}")
        return x
    if kind == "rope":
        x, pos = in_shapes
        hd = attrs["head_dim"]
        if x[-1] % hd or hd % 2:
            raise GraphError(f"rope width {x[-1]} not a multiple of even head_dim {hd}")
        if pos != (x[0],):
            raise GraphError(f"rope positions {pos} vs rows {x}")
        return x
    if kind == "split_heads":
        (x,) = in_shapes
        h = attrs["heads"]
        if len(x) != 2 or x[1] % h:
            raise GraphError(f"split_heads needs (n, H*hd), got {x} for H={h}")
        return (h, x[0], x[1] // h)
    if kind == "concat_heads":
        if len(in_shapes) == 1 and len(in_shapes[0]) == 3:
            h, n, hd = in_shapes[0]
            return (n, h * hd)
        n = in_shapes[0][0]
        if any(len(s) != 2 or s[0] != n for s in in_shapes):
            raise GraphError(f"concat_heads pieces must share rows: {in_shapes}")
        return (n, sum(s[1] for s in in_shapes))
    if kind == "transpose":
        (x,) = in_shapes
        perm = tuple(attrs["perm"])
        if sorted(perm) != list(range(len(x))):
            raise GraphError(f"bad perm {perm} for rank {len(x)}")
        return tuple(x[p] for p in perm)
    if kind == "reshape":
        (x,) = in_shapes
        shape = tuple(attrs["shape"])
        if int(np.prod(x)) != int(np.prod(shape)):
            raise GraphError(f"reshape {x} -> {shape} changes element count")
        return shape
    if kind == "slice":
        (x,) = in_shapes
        axis, start, stop = attrs["axis"], attrs["start"], attrs["stop"]
        if not 0 <= start <= stop <= x[axis]:
            raise GraphError(f"slice [{start}:{stop}] outside axis {axis} of {x}")
        out = list(x)
        out[axis] = stop - start
        return tuple(out)
    if kind == "concat":
        axis = attrs["axis"]
        base = list(in_shapes[0])
        for s in in_shapes[1:]:
            if len(s) != len(base) or any(
                    i != axis and s[i] != base[i] for i in range(len(base))):
                raise GraphError(f"concat shapes {in_shapes} on axis {axis}")
            base[axis] += s[axis]
        return tuple(base)
    if kind == "fused":
        return _fused_shape(in_shapes, attrs)
    raise GraphError(f"unknown op kind {kind!r}")


def _fused_parts(attrs):
    kinds = list(attrs["kinds"])
    part_attrs = list(attrs.get("attrs_list") or [{}] * len(kinds))
    return kinds, part_attrs


def _fused_shape(in_shapes, attrs):
    kinds, part_attrs = _fused_parts(attrs)
    queue = list(in_shapes)
    first = kinds[0]
    arity = OP_ARITY[first]
    cur = infer_shape(first, queue[:arity], part_attrs[0])
    queue = queue[arity:]
    for kind, pa in zip(kinds[1:], part_attrs[1:]):
        extra = OP_ARITY[kind] - 1
        cur = infer_shape(kind, [cur] + queue[:extra], pa)
        queue = queue[extra:]
    if queue:
        raise GraphError("fused node has leftover inputs")
    return cur


class Graph:
    def __init__(self):
        self.inputs: list[str] = []
        self.input_shapes: dict[str, tuple] = {}
        self.constants: dict[str, np.ndarray] = {}
        self.nodes: dict[str, Node] = {}
        self.outputs: list[str] = []
        self.meta: dict = {}
        self._n = 0

    # -- construction ---------------------------------------------------------

    def add_input(self, name, shape):
        self._check_fresh(name)
        self.inputs.append(name)
        self.input_shapes[name] = tuple(shape)
        return name

    def add_const(self, name, arr):
        self._check_fresh(name)
        self.constants[name] = np.asarray(arr, dtype=np.float32)
        return name

    def add(self, kind, inputs, attrs=None, id=None):
        if kind not in OP_ARITY:
            raise GraphError(f"unknown op kind {kind!r}")
        arity = OP_ARITY[kind]
        if arity is not None and len(inputs) != arity:
            raise GraphError(f"{kind} takes {arity} inputs, got {len(inputs)}")
        in_shapes = [self.shape_of(i) for i in inputs]
        shape = infer_shape(kind, in_shapes, attrs or {})
        if id is None:
            id = f"{kind}_{self._n}"
            self._n += 1
        self._check_fresh(id)
        self.nodes[id] = Node(id, kind, inputs, attrs, shape)
        return id

    def _check_fresh(self, name):
        if name in self.nodes or name in self.constants or name in self.input_shapes:
            raise GraphError(f"duplicate id {name!r}")

    def shape_of(self, ref):
        if ref in self.nodes:
            return self.nodes[ref].out_shape
        if ref in self.constants:
            return self.constants[ref].shape
        if ref in self.input_shapes:
            return self.input_shapes[ref]
        raise GraphError(f"unknown id {ref!r}")

    def copy(self) -> "Graph":
        g = Graph()
        g.inputs = list(self.inputs)
        g.input_shapes = dict(self.input_shapes)
        g.constants = dict(self.constants)
        g.nodes = {k: v.copy() for k, v in self.nodes.items()}
        g.outputs = list(self.outputs)
        g.meta = json.loads(json.dumps(self.meta)) if self.meta else {}
        g._n = self._n
        return g

    def fresh_id(self, stem):
        cand = stem
        while (cand in self.nodes or cand in self.constants
               or cand in self.input_shapes):
            cand = f"{stem}_{self._n}"
            self._n += 1
        return cand

    # -- structure queries -----------------------------------------------------

    def consumers(self, ref) -> list[str]:
        return [n.id for n in self.nodes.values() if ref in n.inputs]

    def topo_order(self) -> list[str]:
        order, state = [], {}

        def visit(nid):
            if state.get(nid) == 2:
                return
            if state.get(nid) == 1:
                raise GraphError(f"cycle through {nid!r}")
            state[nid] = 1
            for ref in self.nodes[nid].inputs:
                if ref in self.nodes:
                    visit(ref)
            state[nid] = 2
            order.append(nid)

        for nid in self.nodes:
            visit(nid)
        return order

    def rewire(self, old, new):
        """Point every consumer (and output slot) of `old` at `new`."""
        for n in self.nodes.values():
            n.inputs = [new if ref == old else ref for ref in n.inputs]
        self.outputs = [new if ref == old else ref for ref in self.outputs]

    def prune(self):
        """Drop nodes and constants unreachable from the outputs."""
        live = set()
        stack = [o for o in self.outputs]
        while stack:
            ref = stack.pop()
            if ref in live:
                continue
            live.add(ref)
            if ref in self.nodes:
                stack.extend(self.nodes[ref].inputs)
        self.nodes = {k: v for k, v in self.nodes.items() if k in live}
        self.constants = {k: v for k, v in self.constants.items() if k in live}
        return self

    def diagnostics(self) -> list[str]:
        return self.meta.setdefault("diagnostics", [])

    # -- serialization ------------------------------------------------------------

    def save(self, path):
        """JSON graph + sidecar .bin with the constants (f32le, concatenated)."""
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        table, chunks, offset = [], [], 0
        for name, arr in self.constants.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            table.append({"name": name, "shape": list(arr.shape), "offset": offset})
            chunks.append(raw)
            offset += len(raw)
        doc = {
            "schema": 1,
            "inputs": [{"name": n, "shape": list(self.input_shapes[n])} for n in self.inputs],
            "nodes": [{"id": n.id, "kind": n.kind, "inputs": n.inputs,
                       "attrs": n.attrs, "out_shape": list(n.out_shape)}
                      for n in (self.nodes[i] for i in self.topo_order())],
            "outputs": self.outputs,
            "constants": table,
            "meta": self.meta,
        }
        (path / "graph.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
        (path / "constants.bin").write_bytes(b"".join(chunks))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        doc = json.loads((path / "graph.json").read_text())
        raw = (path / "constants.bin").read_bytes()
        g = cls()
        for rec in doc["inputs"]:
            g.add_input(rec["name"], tuple(rec["shape"]))
        for rec in doc["constants"]:
            numel = int(np.prod(rec["shape"]))
            arr = np.frombuffer(raw, dtype="<f4", count=numel,
                                offset=rec["offset"]).reshape(rec["shape"])
            g.add_const(rec["name"], arr)
        for rec in doc["nodes"]:
            g.add(rec["kind"], rec["inputs"], rec["attrs"], id=rec["id"])
        g.outputs = list(doc["outputs"])
        g.meta = doc.get("meta", {})
        return g


# -- interpreter ---------------------------------------------------------------


def _f64(x):
    return np.asarray(x, dtype=np.float64)


def _eval_op(kind, ins, attrs):
    if kind == "matmul":
        a, b = ins
        if a.ndim == 2:
            return kernels.matmul(a, b)
        return (_f64(a) @ _f64(b)).astype(np.float32)
    if kind == "conv1x1":
        x, k = ins
        co, ci = k.shape[0], k.shape[1]
        out = np.einsum("nxyi,oi->nxyo", _f64(x), _f64(k.reshape(co, ci)))
        return out.astype(np.float32)
    if kind == "add":
        return ins[0] + ins[1]
    if kind == "mul":
        return ins[0] * ins[1]
    if kind == "mul_scalar":
        return ins[0] * np.float32(attrs["value"])
    if kind == "rmsnorm":
        x, gain = ins
        return kernels.rmsnorm(x, gain, attrs.get("eps", 1e-5))
    if kind == "rope":
        x, pos = ins
        return kernels.rope_rotate(x, pos.astype(np.int64), attrs["head_dim"],
                                   attrs["theta"])
    if kind == "softmax":
        return kernels.softmax(ins[0])
    if kind == "silu":
        return kernels.silu(ins[0])
    if kind == "split_heads":
        (x,) = ins
        h = attrs["heads"]
        n, width = x.shape
        return np.ascontiguousarray(x.reshape(n, h, width // h).transpose(1, 0, 2))
    if kind == "concat_heads":
        if len(ins) == 1 and ins[0].ndim == 3:
            h, n, hd = ins[0].shape
            return np.ascontiguousarray(ins[0].transpose(1, 0, 2)).reshape(n, h * hd)
        return np.concatenate(ins, axis=1)
    if kind == "transpose":
        return np.ascontiguousarray(ins[0].transpose(tuple(attrs["perm"])))
    if kind == "reshape":
        return np.ascontiguousarray(ins[0]).reshape(tuple(attrs["shape"]))
    if kind == "slice":
        sl = [slice(None)] * ins[0].ndim
        sl[attrs["axis"]] = slice(attrs["start"], attrs["stop"])
        return np.ascontiguousarray(ins[0][tuple(sl)])
    if kind == "concat":
        return np.concatenate(ins, axis=attrs["axis"])
    if kind == "fused":
        kinds, part_attrs = _fused_parts(attrs)
        queue = list(ins)
        arity = OP_ARITY[kinds[0]]
        cur = _eval_op(kinds[0], queue[:arity], part_attrs[0])
        queue = queue[arity:]
        for k2, pa in zip(kinds[1:], part_attrs[1:]):
            extra = OP_ARITY[k2] - 1
            cur = _eval_op(k2, [cur] + queue[:extra], pa)
            queue = queue[extra:]
        return cur
    raise GraphError(f"unknown op kind {kind!r}")


def evaluate(g: Graph, feeds: dict) -> dict:
    """Evaluate the graph, returning {output_id: array}.

    Deterministic and bit-stable for identical feeds: node order is the
    topological order, each op runs the same kernel path every time.
    """
    values = {}
    for name in g.inputs:
        if name not in feeds:
            raise MissingFeedError(f"missing feed for input {name!r}")
        arr = np.asarray(feeds[name])
        if arr.shape != g.input_shapes[name]:
            raise GraphError(
                f"feed {name!r} has shape {arr.shape}, expected {g.input_shapes[name]}")
        values[name] = arr
    values.update(g.constants)
    for nid in g.topo_order():
        node = g.nodes[nid]
        ins = [values[ref] for ref in node.inputs]
        out = _eval_op(node.kind, ins, node.attrs)
        if tuple(out.shape) != node.out_shape:
            raise GraphError(
                f"node {nid} produced {out.shape}, declared {node.out_shape}")
        values[nid] = out
    missing = [o for o in g.outputs if o not in values]
    if missing:
        raise GraphError(f"outputs {missing} not produced")
    return {o: values[o] for o in g.outputs}
