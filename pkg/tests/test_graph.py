"""Graph IR loading, inference, counting, and einsum-lowering tests."""

import json

import numpy as np
import pytest

from zkeval import graph as G
from zkeval.errors import CycleError, SchemaError, ShapeError


def mlp_doc(in_dim=784, hidden=32, out_dim=10, seed=3, spread=0.6):
    rng = np.random.default_rng(seed)
    w1 = rng.uniform(-spread, spread, size=(in_dim, hidden))
    b1 = rng.uniform(-spread, spread, size=(hidden,))
    w2 = rng.uniform(-spread, spread, size=(hidden, out_dim))
    b2 = rng.uniform(-spread, spread, size=(out_dim,))
    return {
        "ir_version": 1,
        "inputs": [{"name": "x", "shape": [in_dim]}],
        "nodes": [
            {"id": "h", "op": "MatMul", "inputs": ["x", "w1"]},
            {"id": "hb", "op": "Add", "inputs": ["h", "b1"]},
            {"id": "a", "op": "ReLU", "inputs": ["hb"]},
            {"id": "o", "op": "MatMul", "inputs": ["a", "w2"]},
            {"id": "logits", "op": "Add", "inputs": ["o", "b2"]},
        ],
        "outputs": ["logits"],
        "weights": {
            "w1": {"shape": [in_dim, hidden], "data": w1.reshape(-1).tolist()},
            "b1": {"shape": [hidden], "data": b1.tolist()},
            "w2": {"shape": [hidden, out_dim], "data": w2.reshape(-1).tolist()},
            "b2": {"shape": [out_dim], "data": b2.tolist()},
        },
    }


def single_matmul_doc():
    return {
        "ir_version": 1,
        "inputs": [{"name": "x", "shape": [1, 2]}],
        "nodes": [{"id": "y", "op": "MatMul", "inputs": ["x", "w"]}],
        "outputs": ["y"],
        "weights": {"w": {"shape": [2, 1], "data": [1.0, 2.0]}},
    }


def test_load_single_matmul():
    g = G.load_graph(single_matmul_doc())
    assert len(g.nodes) == 1
    assert G.count_macs(g) == 2
    assert g.shapes["y"] == (1, 1)


def test_cycle_error_on_forward_reference():
    doc = single_matmul_doc()
    doc["nodes"] = [
        {"id": "a", "op": "ReLU", "inputs": ["b"]},
        {"id": "b", "op": "MatMul", "inputs": ["x", "w"]},
    ]
    doc["outputs"] = ["a"]
    with pytest.raises(CycleError):
        G.load_graph(doc)


def test_schema_errors():
    with pytest.raises(SchemaError):
        G.load_graph({"ir_version": 2, "inputs": [], "nodes": [], "outputs": [], "weights": {}})
    doc = single_matmul_doc()
    doc["nodes"][0]["inputs"] = ["x", "nope"]
    with pytest.raises(SchemaError):
        G.load_graph(doc)
    doc = single_matmul_doc()
    doc["outputs"] = ["missing"]
    with pytest.raises(SchemaError):
        G.load_graph(doc)
    doc = single_matmul_doc()
    doc["weights"]["unused"] = {"shape": [1], "data": [0.0]}
    with pytest.raises(SchemaError):
        G.load_graph(doc)


def test_shape_error():
    doc = single_matmul_doc()
    doc["weights"]["w"] = {"shape": [3, 1], "data": [1.0, 2.0, 3.0]}
    with pytest.raises(ShapeError):
        G.load_graph(doc)


def test_mlp_parameter_count():
    g = G.load_graph(mlp_doc())
    assert g.n_parameters() == 784 * 32 + 32 + 32 * 10 + 10  # 25,418


def test_mlp_mac_count():
    g = G.load_graph(mlp_doc())
    assert G.count_macs(g) == 784 * 32 + 32 * 10  # 25,408


def test_matmul_mac_example():
    doc = {
        "ir_version": 1,
        "inputs": [{"name": "x", "shape": [4, 8]}],
        "nodes": [{"id": "y", "op": "MatMul", "inputs": ["x", "w"]}],
        "outputs": ["y"],
        "weights": {"w": {"shape": [8, 2], "data": [0.0] * 16}},
    }
    assert G.count_macs(G.load_graph(doc)) == 64


def test_reshape_only_graph_has_zero_macs():
    doc = {
        "ir_version": 1,
        "inputs": [{"name": "x", "shape": [4, 2]}],
        "nodes": [{"id": "y", "op": "Reshape", "inputs": ["x"], "shape": [8]}],
        "outputs": ["y"],
        "weights": {},
    }
    assert G.count_macs(G.load_graph(doc)) == 0


def test_identity_matmul_inference():
    doc = single_matmul_doc()
    doc["inputs"] = [{"name": "x", "shape": [2]}]
    doc["weights"]["w"] = {"shape": [2, 2], "data": [1.0, 0.0, 0.0, 1.0]}
    g = G.load_graph(doc)
    out = G.infer_float(g, np.array([1.0, 2.0]))
    assert np.allclose(out, [1.0, 2.0])


def test_relu_semantics():
    doc = {
        "ir_version": 1,
        "inputs": [{"name": "x", "shape": [3]}],
        "nodes": [{"id": "y", "op": "ReLU", "inputs": ["x"]}],
        "outputs": ["y"],
        "weights": {},
    }
    g = G.load_graph(doc)
    assert np.array_equal(G.infer_float(g, np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])


def _mlp_oracle(doc, x):
    w = {k: np.asarray(v["data"]).reshape(v["shape"]) for k, v in doc["weights"].items()}
    h = np.maximum(x @ w["w1"] + w["b1"], 0.0)
    return h @ w["w2"] + w["b2"]


def test_mlp_against_hand_rolled_oracle():
    doc = mlp_doc(in_dim=20, hidden=8, out_dim=3)
    g = G.load_graph(doc)
    rng = np.random.default_rng(11)
    for _ in range(20):
        x = rng.normal(size=20)
        assert np.max(np.abs(G.infer_float(g, x) - _mlp_oracle(doc, x))) <= 1e-9


def test_matmul_lowering_is_definitional():
    g = G.load_graph(single_matmul_doc())
    lowered = G.lower_to_einsum(g)
    (node,) = lowered.nodes
    assert node.op == "Einsum" and node.attrs["equation"] == "ij,jk->ik"


def _conv_doc(c=1, h=8, w=8, o=3, k=3, stride=1, padding=0, seed=5):
    rng = np.random.default_rng(seed)
    kernel = rng.normal(size=(o, c, k, k))
    return {
        "ir_version": 1,
        "inputs": [{"name": "x", "shape": [c, h, w]}],
        "nodes": [
            {"id": "y", "op": "Conv2D", "inputs": ["x", "k"], "stride": stride,
             "padding": padding}
        ],
        "outputs": ["y"],
        "weights": {"k": {"shape": list(kernel.shape), "data": kernel.reshape(-1).tolist()}},
    }


def _conv_oracle(x, k, stride, pad):
    c, h, w = x.shape
    o, _, kh, kw = k.shape
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((o, oh, ow))
    for oc in range(o):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for ci in range(c):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[ci, i * stride + a, j * stride + b] * k[oc, ci, a, b]
                out[oc, i, j] = acc
    return out


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv_lowering_matches_direct_conv_oracle(stride, padding):
    doc = _conv_doc(c=2, h=8, w=8, o=3, k=3, stride=stride, padding=padding)
    g = G.load_graph(doc)
    lowered = G.lower_to_einsum(g)
    rng = np.random.default_rng(17)
    x = rng.normal(size=(2, 8, 8))
    k = np.asarray(doc["weights"]["k"]["data"]).reshape(3, 2, 3, 3)
    oracle = _conv_oracle(x, k, stride, padding)
    assert np.max(np.abs(G.infer_float(g, x) - oracle)) <= 1e-9
    assert np.max(np.abs(G.infer_float(lowered, x) - oracle)) <= 1e-9


def test_one_by_one_conv_equals_per_pixel_matmul():
    doc = _conv_doc(c=4, h=5, w=5, o=2, k=1)
    g = G.load_graph(doc)
    lowered = G.lower_to_einsum(g)
    rng = np.random.default_rng(23)
    x = rng.normal(size=(4, 5, 5))
    k = np.asarray(doc["weights"]["k"]["data"]).reshape(2, 4, 1, 1)
    per_pixel = np.einsum("oc,chw->ohw", k[:, :, 0, 0], x)
    assert np.max(np.abs(G.infer_float(lowered, x) - per_pixel)) <= 1e-9


def test_macs_invariant_under_lowering():
    for doc in (mlp_doc(in_dim=12, hidden=5, out_dim=2), _conv_doc()):
        g = G.load_graph(doc)
        assert G.count_macs(G.lower_to_einsum(g)) == G.count_macs(g)


def test_lowering_preserves_inference_on_mlp():
    g = G.load_graph(mlp_doc(in_dim=30, hidden=7, out_dim=4))
    lowered = G.lower_to_einsum(g)
    rng = np.random.default_rng(29)
    for _ in range(10):
        x = rng.normal(size=30)
        assert np.max(np.abs(G.infer_float(g, x) - G.infer_float(lowered, x))) <= 1e-9


def test_document_round_trip_is_identity():
    doc = mlp_doc(in_dim=6, hidden=4, out_dim=2)
    g = G.load_graph(doc)
    doc2 = G.graph_to_document(g)
    g2 = G.load_graph(json.loads(json.dumps(doc2)))
    assert G.graph_to_document(g2) == doc2
    x = np.linspace(-1, 1, 6)
    assert np.array_equal(G.infer_float(g, x), G.infer_float(g2, x))


def test_fused_bias_pairs_detects_mlp_biases():
    g = G.lower_to_einsum(G.load_graph(mlp_doc(in_dim=9, hidden=4, out_dim=2)))
    pairs = G.fused_bias_pairs(g)
    assert pairs == {"hb": ("h", "b1"), "logits": ("o", "b2")}


def test_reductions_and_softmax_style_ops():
    doc = {
        "ir_version": 1,
        "inputs": [{"name": "x", "shape": [4]}],
        "nodes": [
            {"id": "e", "op": "Exp", "inputs": ["x"]},
            {"id": "s", "op": "Sum", "inputs": ["e"]},
            {"id": "r", "op": "Reciprocal", "inputs": ["s"]},
            {"id": "y", "op": "Mul", "inputs": ["e", "r"]},
        ],
        "outputs": ["y"],
        "weights": {},
    }
    g = G.load_graph(doc)
    x = np.array([0.1, -0.4, 1.2, 0.0])
    want = np.exp(x) / np.exp(x).sum()
    assert np.max(np.abs(G.infer_float(g, x) - want)) <= 1e-12
    assert g.shapes["s"] == (1,)


def test_max_min_argmax():
    doc = {
        "ir_version": 1,
        "inputs": [{"name": "x", "shape": [5]}],
        "nodes": [
            {"id": "mx", "op": "Max", "inputs": ["x"]},
            {"id": "mn", "op": "Min", "inputs": ["x"]},
            {"id": "am", "op": "ArgMax", "inputs": ["x"]},
        ],
        "outputs": ["mx", "mn", "am"],
        "weights": {},
    }
    g = G.load_graph(doc)
    mx, mn, am = G.infer_float(g, np.array([3.0, -1.0, 7.0, 7.0, 0.0]))
    assert mx[0] == 7.0 and mn[0] == -1.0 and am[0] == 2.0
