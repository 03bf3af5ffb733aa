"""Computational-graph IR: loading, validation, float inference, op counting.

A graph document is JSON (see docs/ir-format.md): named inputs, a
topologically ordered node list, output refs, and private weight tensors.
Supported ops cover dense/convolutional nets with lookup-friendly
nonlinearities; ``lower_to_einsum`` rewrites MatMul/Conv2D into Einstein
summations so the circuit layer only ever sees one contraction primitive.
"""

from __future__ import annotations

import base64
import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CycleError, SchemaError, ShapeError, UnsupportedOpError

IR_VERSION = 1

OPS = {
    "Einsum", "Add", "Sub", "Mul", "MatMul", "Conv2D",
    "ReLU", "Sigmoid", "Exp", "Reciprocal",
    "Sum", "Max", "Min", "ArgMax", "Reshape", "Constant",
}

ACTIVATIONS = {"ReLU", "Sigmoid", "Exp", "Reciprocal"}
REDUCTIONS = {"Sum", "Max", "Min"}


@dataclass
class Tensor:
    """A named shaped array; ``data`` is row-major and optional for inputs."""

    name: str
    shape: tuple[int, ...]
    data: np.ndarray | None = None

    def __post_init__(self):
        self.shape = tuple(int(d) for d in self.shape)
        if any(d <= 0 for d in self.shape):
            raise ShapeError(f"tensor {self.name!r}: non-positive dim in {self.shape}")
        if self.data is not None:
            self.data = np.asarray(self.data, dtype=np.float64).reshape(self.shape)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


@dataclass
class Node:
    id: str
    op: str
    inputs: tuple[str, ...]
    attrs: dict = field(default_factory=dict)


@dataclass
class Graph:
    """Validated immutable model graph f(x, W)."""

    inputs: list[tuple[str, tuple[int, ...]]]
    nodes: list[Node]
    outputs: list[str]
    weights: dict[str, Tensor]
    shapes: dict[str, tuple[int, ...]] = field(default_factory=dict)

    @property
    def input_names(self) -> list[str]:
        return [n for n, _ in self.inputs]

    def n_parameters(self) -> int:
        return sum(t.size for t in self.weights.values())

    def node_by_id(self, node_id: str) -> Node:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def consumers(self, name: str) -> list[str]:
        out = [n.id for n in self.nodes if name in n.inputs]
        if name in self.outputs:
            out.append("<output>")
        return out


# ---------------------------------------------------------------------------
# Document parsing


def _tensor_from_doc(name: str, doc: dict) -> Tensor:
    if not isinstance(doc, dict) or "shape" not in doc:
        raise SchemaError(f"tensor {name!r}: expected object with 'shape'")
    shape = tuple(doc["shape"])
    if "data" in doc:
        data = np.asarray(doc["data"], dtype=np.float64)
    elif "data_b64" in doc:
        dtype = {"f32": "<f4", "f64": "<f8"}.get(doc.get("dtype", "f32"))
        if dtype is None:
            raise SchemaError(f"tensor {name!r}: unknown dtype {doc.get('dtype')!r}")
        data = np.frombuffer(base64.b64decode(doc["data_b64"]), dtype=dtype).astype(np.float64)
    else:
        raise SchemaError(f"tensor {name!r}: needs 'data' or 'data_b64'")
    if data.size != int(np.prod(shape)):
        raise SchemaError(
            f"tensor {name!r}: {data.size} values for shape {list(shape)}"
        )
    return Tensor(name, shape, data.reshape(shape))


def _tensor_to_doc(t: Tensor, encoding: str = "b64") -> dict:
    if encoding == "b64":
        return {
            "shape": list(t.shape),
            "dtype": "f64",
            "data_b64": base64.b64encode(t.data.astype("<f8").tobytes()).decode("ascii"),
        }
    return {"shape": list(t.shape), "data": t.data.reshape(-1).tolist()}


def load_graph(document) -> Graph:
    """Parse and fully validate a graph document (dict, JSON text, or path)."""
    if isinstance(document, (str, Path)):
        text = Path(document).read_text() if isinstance(document, Path) else document
        if isinstance(document, str) and not document.lstrip().startswith("{"):
            text = Path(document).read_text()
        try:
            document = json.loads(text)
        except json.JSONDecodeError as e:
            raise SchemaError(f"not valid JSON: {e}") from e
    if not isinstance(document, dict):
        raise SchemaError("graph document must be a JSON object")
    if document.get("ir_version") != IR_VERSION:
        raise SchemaError(f"unsupported ir_version {document.get('ir_version')!r}")
    for key in ("inputs", "nodes", "outputs", "weights"):
        if key not in document:
            raise SchemaError(f"missing top-level key {key!r}")

    inputs: list[tuple[str, tuple[int, ...]]] = []
    for item in document["inputs"]:
        if not isinstance(item, dict) or "name" not in item or "shape" not in item:
            raise SchemaError("each input needs 'name' and 'shape'")
        inputs.append((item["name"], tuple(int(d) for d in item["shape"])))

    weights = {
        name: _tensor_from_doc(name, tdoc) for name, tdoc in document["weights"].items()
    }

    nodes = []
    for nd in document["nodes"]:
        if not isinstance(nd, dict) or "id" not in nd or "op" not in nd:
            raise SchemaError("each node needs 'id' and 'op'")
        op = nd["op"]
        if op not in OPS:
            raise UnsupportedOpError(f"node {nd['id']!r}: unknown op {op!r}")
        attrs = {k: v for k, v in nd.items() if k not in ("id", "op", "inputs")}
        if op == "Constant" and "tensor" in attrs:
            attrs["tensor"] = _tensor_from_doc(f"{nd['id']}.const", attrs["tensor"])
        nodes.append(Node(nd["id"], op, tuple(nd.get("inputs", ())), attrs))

    g = Graph(inputs, nodes, list(document["outputs"]), weights)
    _validate(g)
    return g


def graph_to_document(g: Graph, encoding: str = "b64") -> dict:
    nodes = []
    for n in g.nodes:
        nd = {"id": n.id, "op": n.op, "inputs": list(n.inputs)}
        for k, v in n.attrs.items():
            nd[k] = _tensor_to_doc(v, encoding) if isinstance(v, Tensor) else v
        nodes.append(nd)
    return {
        "ir_version": IR_VERSION,
        "inputs": [{"name": n, "shape": list(s)} for n, s in g.inputs],
        "nodes": nodes,
        "outputs": list(g.outputs),
        "weights": {name: _tensor_to_doc(t, encoding) for name, t in g.weights.items()},
    }


def save_graph(g: Graph, path) -> None:
    Path(path).write_text(json.dumps(graph_to_document(g), indent=1))


# ---------------------------------------------------------------------------
# Validation and shape inference


def _validate(g: Graph) -> None:
    names: set[str] = set()
    for name, shape in g.inputs:
        if name in names:
            raise SchemaError(f"duplicate name {name!r}")
        names.add(name)
        g.shapes[name] = tuple(shape)
    for name, t in g.weights.items():
        if name in names:
            raise SchemaError(f"duplicate name {name!r}")
        names.add(name)
        g.shapes[name] = t.shape

    later_ids = {n.id for n in g.nodes}
    for node in g.nodes:
        if node.id in names:
            raise SchemaError(f"duplicate name {node.id!r}")
        later_ids.discard(node.id)
        for ref in node.inputs:
            if ref in later_ids or ref == node.id:
                raise CycleError(f"node {node.id!r} references {ref!r} before it is defined")
            if ref not in names:
                raise SchemaError(f"node {node.id!r} references unknown value {ref!r}")
        g.shapes[node.id] = _node_output_shape(g, node)
        names.add(node.id)

    for ref in g.outputs:
        if ref not in names:
            raise SchemaError(f"output {ref!r} does not resolve")

    referenced = {r for n in g.nodes for r in n.inputs}
    for wname in g.weights:
        if wname not in referenced:
            raise SchemaError(f"private weight {wname!r} is never referenced")


def _node_output_shape(g: Graph, node: Node) -> tuple[int, ...]:
    shapes = [g.shapes[r] for r in node.inputs]
    op = node.op

    def arity(n):
        if len(node.inputs) != n:
            raise SchemaError(f"node {node.id!r}: {op} takes {n} input(s)")

    if op in ("Add", "Sub", "Mul"):
        arity(2)
        try:
            return tuple(np.broadcast_shapes(shapes[0], shapes[1]))
        except ValueError as e:
            raise ShapeError(f"node {node.id!r}: {shapes[0]} vs {shapes[1]}") from e
    if op == "MatMul":
        arity(2)
        a, b = shapes
        if len(a) == 2 and len(b) == 2:
            if a[1] != b[0]:
                raise ShapeError(f"node {node.id!r}: {a} @ {b}")
            return (a[0], b[1])
        if len(a) == 1 and len(b) == 2:
            if a[0] != b[0]:
                raise ShapeError(f"node {node.id!r}: {a} @ {b}")
            return (b[1],)
        if len(a) == 2 and len(b) == 1:
            if a[1] != b[0]:
                raise ShapeError(f"node {node.id!r}: {a} @ {b}")
            return (a[0],)
        raise ShapeError(f"node {node.id!r}: MatMul needs 1D/2D operands, got {a} @ {b}")
    if op == "Conv2D":
        arity(2)
        x, k = shapes
        if len(x) != 3 or len(k) != 4:
            raise ShapeError(f"node {node.id!r}: Conv2D wants (C,H,W) and (O,C,kh,kw)")
        stride = int(node.attrs.get("stride", 1))
        pad = int(node.attrs.get("padding", 0))
        if stride < 1 or pad < 0:
            raise SchemaError(f"node {node.id!r}: bad stride/padding")
        c, h, w = x
        o, kc, kh, kw = k
        if kc != c:
            raise ShapeError(f"node {node.id!r}: channel mismatch {c} vs {kc}")
        oh = (h + 2 * pad - kh) // stride + 1
        ow = (w + 2 * pad - kw) // stride + 1
        if oh <= 0 or ow <= 0:
            raise ShapeError(f"node {node.id!r}: kernel does not fit input")
        return (o, oh, ow)
    if op in ACTIVATIONS:
        arity(1)
        return shapes[0]
    if op in REDUCTIONS or op == "ArgMax":
        arity(1)
        return (1,)
    if op == "Reshape":
        arity(1)
        new = tuple(int(d) for d in node.attrs.get("shape", ()))
        if not new or any(d <= 0 for d in new):
            raise SchemaError(f"node {node.id!r}: Reshape needs a positive 'shape'")
        if int(np.prod(new)) != int(np.prod(shapes[0])):
            raise ShapeError(f"node {node.id!r}: cannot reshape {shapes[0]} to {new}")
        return new
    if op == "Constant":
        arity(0)
        t = node.attrs.get("tensor")
        if not isinstance(t, Tensor):
            raise SchemaError(f"node {node.id!r}: Constant needs a 'tensor' attr")
        return t.shape
    if op == "Einsum":
        arity(2)
        return _einsum_validate(g, node, shapes)
    raise UnsupportedOpError(op)


def parse_einsum(equation: str) -> tuple[list[str], str]:
    if "->" not in equation:
        raise SchemaError(f"einsum {equation!r}: explicit '->' required")
    lhs, out = equation.split("->")
    specs = lhs.split(",")
    if len(specs) != 2:
        raise SchemaError(f"einsum {equation!r}: exactly two operands supported")
    for spec in specs + [out]:
        if not all(c.isalpha() and c.islower() for c in spec):
            raise SchemaError(f"einsum {equation!r}: indices must be lowercase letters")
    for spec in specs:
        if len(set(spec)) != len(spec):
            raise SchemaError(f"einsum {equation!r}: repeated index within one operand")
    if len(set(out)) != len(out):
        raise SchemaError(f"einsum {equation!r}: repeated output index")
    in_letters = set(specs[0]) | set(specs[1])
    if not set(out) <= in_letters:
        raise SchemaError(f"einsum {equation!r}: output index not present in inputs")
    return specs, out


def _einsum_extents(equation: str, shapes) -> dict[str, int]:
    specs, _ = parse_einsum(equation)
    extents: dict[str, int] = {}
    for spec, shape in zip(specs, shapes):
        if len(spec) != len(shape):
            raise ShapeError(f"einsum {equation!r}: spec {spec!r} vs shape {shape}")
        for letter, dim in zip(spec, shape):
            if extents.setdefault(letter, dim) != dim:
                raise ShapeError(f"einsum {equation!r}: extent clash on {letter!r}")
    return extents


def _einsum_validate(g: Graph, node: Node, shapes) -> tuple[int, ...]:
    equation = node.attrs.get("equation")
    if not isinstance(equation, str):
        raise SchemaError(f"node {node.id!r}: Einsum needs an 'equation'")
    extents = _einsum_extents(equation, shapes)
    _, out = parse_einsum(equation)
    if node.attrs.get("gather"):
        _gather_structure(g, node)  # raises if the tag is wrong
    return tuple(extents[c] for c in out) if out else (1,)


def _constant_value(g: Graph, ref: str) -> np.ndarray | None:
    if ref in g.weights:
        return None
    try:
        node = g.node_by_id(ref)
    except KeyError:
        return None
    if node.op == "Constant":
        return node.attrs["tensor"].data
    return None


def _gather_structure(g: Graph, node: Node) -> tuple[int, np.ndarray]:
    """Validate a selection einsum and return (source_operand, gather map).

    A gather einsum contracts its entire source operand against a constant
    0/1 selector with at most one active cell per output element; in a
    circuit it is pure re-wiring.  The returned map holds, per flat output
    index, the flat source index or -1 for padding zeros.
    """
    specs, out = parse_einsum(node.attrs["equation"])
    shapes = [g.shapes[r] for r in node.inputs]
    extents = _einsum_extents(node.attrs["equation"], shapes)
    for sel_pos in (1, 0):
        sel = _constant_value(g, node.inputs[sel_pos])
        if sel is None:
            continue
        src_pos = 1 - sel_pos
        src_spec, sel_spec = specs[src_pos], specs[sel_pos]
        if set(src_spec) & set(out):
            continue  # source must be fully contracted
        if set(sel_spec) != set(src_spec) | set(out):
            continue
        if not np.isin(sel, (0.0, 1.0)).all():
            raise SchemaError(f"node {node.id!r}: gather selector must be 0/1")
        # Move selector axes to (source..., out...) order and flatten.
        perm = [sel_spec.index(c) for c in src_spec + out]
        mat = np.transpose(sel, perm).reshape(
            int(np.prod([extents[c] for c in src_spec])) or 1,
            int(np.prod([extents[c] for c in out])) or 1,
        )
        counts = (mat != 0).sum(axis=0)
        if counts.max(initial=0) > 1:
            raise SchemaError(f"node {node.id!r}: gather selector picks >1 source cell")
        gather = np.where(counts == 0, -1, np.argmax(mat, axis=0))
        return src_pos, gather.astype(np.int64)
    raise SchemaError(f"node {node.id!r}: 'gather' tag does not match operands")


def gather_structure(g: Graph, node: Node) -> tuple[int, np.ndarray]:
    return _gather_structure(g, node)


# ---------------------------------------------------------------------------
# Reference float inference


def infer_float(g: Graph, x) -> np.ndarray:
    """Real-arithmetic forward pass; the semantic reference for every op."""
    env: dict[str, np.ndarray] = {}
    if isinstance(x, dict):
        for name, _ in g.inputs:
            if name not in x:
                raise ShapeError(f"missing input {name!r}")
            env[name] = np.asarray(x[name], dtype=np.float64)
    else:
        if len(g.inputs) != 1:
            raise ShapeError("graph has multiple inputs; pass a dict")
        env[g.inputs[0][0]] = np.asarray(x, dtype=np.float64)
    for name, shape in g.inputs:
        if env[name].shape != tuple(shape):
            raise ShapeError(f"input {name!r}: got {env[name].shape}, want {tuple(shape)}")
    for name, t in g.weights.items():
        env[name] = t.data

    for node in g.nodes:
        env[node.id] = _eval_node(node, [env[r] for r in node.inputs])

    outs = [env[r] for r in g.outputs]
    return outs[0] if len(outs) == 1 else outs


def _eval_node(node: Node, vals: list[np.ndarray]) -> np.ndarray:
    op = node.op
    if op == "Einsum":
        return np.einsum(node.attrs["equation"], *vals)
    if op == "Add":
        return vals[0] + vals[1]
    if op == "Sub":
        return vals[0] - vals[1]
    if op == "Mul":
        return vals[0] * vals[1]
    if op == "MatMul":
        return vals[0] @ vals[1]
    if op == "Conv2D":
        return _conv2d(vals[0], vals[1], int(node.attrs.get("stride", 1)),
                       int(node.attrs.get("padding", 0)))
    if op == "ReLU":
        return np.maximum(vals[0], 0.0)
    if op == "Sigmoid":
        return 1.0 / (1.0 + np.exp(-vals[0]))
    if op == "Exp":
        return np.exp(vals[0])
    if op == "Reciprocal":
        return 1.0 / vals[0]
    if op == "Sum":
        return np.asarray([vals[0].sum()])
    if op == "Max":
        return np.asarray([vals[0].max()])
    if op == "Min":
        return np.asarray([vals[0].min()])
    if op == "ArgMax":
        return np.asarray([float(np.argmax(vals[0].reshape(-1)))])
    if op == "Reshape":
        return vals[0].reshape(tuple(node.attrs["shape"]))
    if op == "Constant":
        return node.attrs["tensor"].data
    raise UnsupportedOpError(op)


def _conv2d(x: np.ndarray, k: np.ndarray, stride: int, pad: int) -> np.ndarray:
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((c * kh * kw, oh * ow))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, i : i + stride * oh : stride, j : j + stride * ow : stride]
            cols[(np.arange(c) * kh + i) * kw + j] = patch.reshape(c, -1)
    return (k.reshape(o, -1) @ cols).reshape(o, oh, ow)


# ---------------------------------------------------------------------------
# Operation counting


def count_ops(g: Graph) -> dict:
    """Multiply-accumulate and elementwise operation totals."""
    macs = 0
    element_ops = 0
    for node in g.nodes:
        shapes = [g.shapes[r] for r in node.inputs]
        out_shape = g.shapes[node.id]
        if node.op == "MatMul":
            a, b = shapes
            k = a[-1]
            m = a[0] if len(a) == 2 else 1
            n = b[1] if len(b) == 2 else 1
            macs += m * n * k
        elif node.op == "Conv2D":
            o, c, kh, kw = shapes[1]
            macs += int(np.prod(out_shape)) * kh * kw * c
        elif node.op == "Einsum":
            if node.attrs.get("gather"):
                continue
            extents = _einsum_extents(node.attrs["equation"], shapes)
            macs += int(np.prod(list(extents.values())))
        elif node.op in ("Add", "Sub", "Mul") or node.op in ACTIVATIONS:
            element_ops += int(np.prod(out_shape))
        elif node.op in REDUCTIONS:
            element_ops += int(np.prod(shapes[0]))
    return {"macs": macs, "element_ops": element_ops}


def count_macs(g: Graph) -> int:
    return count_ops(g)["macs"]


# ---------------------------------------------------------------------------
# Lowering MatMul / Conv2D to Einstein summations


def lower_to_einsum(g: Graph) -> Graph:
    """Rewrite every MatMul and Conv2D into Einsum nodes.

    Conv2D becomes an im2col-style constant gather followed by a matrix
    contraction; float inference of the result is bit-comparable to the
    original graph and MAC counts are preserved.
    """
    doc_nodes: list[Node] = []
    for node in g.nodes:
        if node.op == "MatMul":
            a, b = (g.shapes[r] for r in node.inputs)
            if len(a) == 2 and len(b) == 2:
                eq = "ij,jk->ik"
            elif len(a) == 1:
                eq = "j,jk->k"
            else:
                eq = "ij,j->i"
            doc_nodes.append(Node(node.id, "Einsum", node.inputs, {"equation": eq}))
        elif node.op == "Conv2D":
            doc_nodes.extend(_lower_conv(g, node))
        else:
            doc_nodes.append(copy.deepcopy(node))
    lowered = Graph(list(g.inputs), doc_nodes, list(g.outputs),
                    {k: Tensor(t.name, t.shape, t.data.copy()) for k, t in g.weights.items()})
    _validate(lowered)
    return lowered


def _lower_conv(g: Graph, node: Node) -> list[Node]:
    xr, kr = node.inputs
    c, h, w = g.shapes[xr]
    o, _, kh, kw = g.shapes[kr]
    stride = int(node.attrs.get("stride", 1))
    pad = int(node.attrs.get("padding", 0))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    r_ext, q_ext = c * kh * kw, oh * ow

    sel = np.zeros((c, h, w, r_ext, q_ext))
    for ci in range(c):
        for khi in range(kh):
            for kwi in range(kw):
                r = (ci * kh + khi) * kw + kwi
                for ohi in range(oh):
                    hi = ohi * stride + khi - pad
                    if not (0 <= hi < h):
                        continue
                    for owi in range(ow):
                        wi = owi * stride + kwi - pad
                        if 0 <= wi < w:
                            sel[ci, hi, wi, r, ohi * ow + owi] = 1.0

    nid = node.id
    return [
        Node(f"{nid}.sel", "Constant", (),
             {"tensor": Tensor(f"{nid}.sel", (c, h, w, r_ext, q_ext), sel)}),
        Node(f"{nid}.cols", "Einsum", (xr, f"{nid}.sel"),
             {"equation": "chw,chwrq->rq", "gather": True}),
        Node(f"{nid}.kmat", "Reshape", (kr,), {"shape": [o, r_ext]}),
        Node(f"{nid}.mm", "Einsum", (f"{nid}.kmat", f"{nid}.cols"),
             {"equation": "or,rq->oq"}),
        Node(nid, "Reshape", (f"{nid}.mm",), {"shape": [o, oh, ow]}),
    ]


def fused_bias_pairs(g: Graph) -> dict[str, tuple[str, str]]:
    """Add nodes that can fold into a contraction's accumulator seed.

    Returns ``{add_id: (einsum_id, bias_weight_name)}`` for every Add whose
    operands are a sole-consumer non-gather Einsum and a broadcastable
    private weight.  Folding the bias into the accumulator start value saves
    one elementwise pass per output neuron.
    """
    consumer_count: dict[str, int] = {}
    for n in g.nodes:
        for r in n.inputs:
            consumer_count[r] = consumer_count.get(r, 0) + 1
    for r in g.outputs:
        consumer_count[r] = consumer_count.get(r, 0) + 1

    einsum_ids = {n.id: n for n in g.nodes if n.op == "Einsum" and not n.attrs.get("gather")}
    pairs: dict[str, tuple[str, str]] = {}
    for n in g.nodes:
        if n.op != "Add":
            continue
        for a, b in ((n.inputs[0], n.inputs[1]), (n.inputs[1], n.inputs[0])):
            if (a in einsum_ids and b in g.weights
                    and consumer_count.get(a) == 1 and consumer_count.get(b) == 1):
                try:
                    np.broadcast_shapes(g.shapes[b], g.shapes[a])
                except ValueError:
                    continue
                if tuple(np.broadcast_shapes(g.shapes[b], g.shapes[a])) == g.shapes[a]:
                    pairs[n.id] = (a, b)
                    break
    return pairs
