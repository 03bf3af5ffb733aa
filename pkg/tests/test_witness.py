"""Weight hashing and witness-generation tests."""

import time

import numpy as np
import pytest

import zkeval.calibration as C
from zkeval import circuit as Z
from zkeval import graph as G
from zkeval import witness as W
from zkeval.merkle import EMPTY_LEAF

from test_graph import mlp_doc
from test_calibrate import _samples


@pytest.fixture(scope="module")
def small_mlp():
    g = G.load_graph(mlp_doc(in_dim=20, hidden=8, out_dim=3))
    cal = C.calibrate(g, _samples((20,), n=6), mode="resources")
    cs = Z.lower_graph(g, cal)
    wvec = W.encode_weight_vector(g.weights, cs.weight_layout)
    return g, cal, cs, wvec


def test_hash_empty_weight_set_is_sentinel():
    assert W.hash_weights({}, 7) == EMPTY_LEAF


def test_hash_is_order_independent():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 3))
    b = rng.normal(size=(3,))
    d1 = W.hash_weights({"a": a, "b": b}, 7)
    d2 = W.hash_weights({"b": b, "a": a}, 7)
    assert d1 == d2


def test_hash_avalanche_on_single_element():
    rng = np.random.default_rng(2)
    base = {"w": rng.normal(size=100)}
    d0 = W.hash_weights(base, 7)
    changed = 0
    for trial in range(1000):
        w = base["w"].copy()
        idx = rng.integers(0, 100)
        w[idx] += 0.25  # at least a few grid steps
        if W.hash_weights({"w": w}, 7) != d0:
            changed += 1
    assert changed == 1000


def test_hash_depends_on_scale():
    w = {"w": np.asarray([0.3, -0.7])}
    assert W.hash_weights(w, 7) != W.hash_weights(w, 8)


def test_identity_passthrough_witness():
    doc = {
        "ir_version": 1,
        "inputs": [{"name": "x", "shape": [4]}],
        "nodes": [{"id": "y", "op": "Reshape", "inputs": ["x"], "shape": [4]}],
        "outputs": ["y"],
        "weights": {},
    }
    g = G.load_graph(doc)
    cal = C.calibrate(g, [np.asarray([0.5, -0.25, 0.0, 1.0])])
    cs = Z.lower_graph(g, cal)
    w = W.make_witness(g, cal, np.asarray([0.5, -0.25, 0.0, 1.0]), circuit=cs)
    assert np.array_equal(w.y_tilde, w.x_tilde)
    assert Z.check_satisfied(cs, w.assignment(cs))


def test_relu_graph_on_negative_input():
    doc = {
        "ir_version": 1,
        "inputs": [{"name": "x", "shape": [2]}],
        "nodes": [{"id": "y", "op": "ReLU", "inputs": ["x"]}],
        "outputs": ["y"],
        "weights": {},
    }
    g = G.load_graph(doc)
    cal = C.calibrate(g, [np.asarray([-0.5, 0.25]), np.asarray([0.75, -1.0])])
    cs = Z.lower_graph(g, cal)
    w = W.make_witness(g, cal, np.asarray([-0.5, -1.0]), circuit=cs)
    assert np.array_equal(w.y_tilde, [0, 0])


def test_witness_satisfies_circuit_and_matches_simulator(small_mlp):
    g, cal, cs, wvec = small_mlp
    lowered = G.lower_to_einsum(g)
    rng = np.random.default_rng(7)
    for _ in range(5):
        x = np.round(rng.uniform(-1, 1, 20) * 64) / 64
        w = W.make_witness(g, cal, x, circuit=cs)
        assert Z.check_satisfied(cs, w.assignment(cs, wvec))
        # independent oracle: the functional fixed-point simulator
        sim = C.simulate_quantized(lowered, cal, x)
        assert np.allclose(w.decode_outputs(), sim)


def test_witness_quantization_error_within_bound(small_mlp):
    g, cal, cs, wvec = small_mlp
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(40):
        x = np.round(rng.uniform(-1, 1, 20) * 16) / 16
        w = W.make_witness(g, cal, x, circuit=cs)
        f = G.infer_float(g, x)
        err = np.max(np.abs(w.decode_outputs() - f)) / max(np.max(np.abs(f)), 1e-9)
        worst = max(worst, err)
    assert worst <= cal.error_bound


def test_tampered_output_fails_satisfaction(small_mlp):
    g, cal, cs, wvec = small_mlp
    w = W.make_witness(g, cal, np.zeros(20), circuit=cs)
    asg = w.assignment(cs, wvec)
    asg.instance[cs.instance_meta["n_x"]] += 1
    assert not Z.check_satisfied(cs, asg)


def test_single_cell_mutations_detected(small_mlp):
    g, cal, cs, wvec = small_mlp
    w = W.make_witness(g, cal, np.full(20, 0.25), circuit=cs)
    rng = np.random.default_rng(3)
    cells = rng.choice(cs.n_cells, size=min(100, cs.n_cells), replace=False)
    for c in cells:
        asg = w.assignment(cs, wvec)
        asg.trace = asg.trace.copy()
        asg.trace[c] += 1
        ok, viol = Z.evaluate(cs, asg)
        assert not ok and viol is not None


def test_weight_hash_matches_make_witness(small_mlp):
    g, cal, cs, wvec = small_mlp
    w = W.make_witness(g, cal, np.zeros(20), circuit=cs)
    assert w.weight_hash == W.hash_weights(g.weights, cal)


def test_witness_file_round_trip(small_mlp):
    g, cal, cs, wvec = small_mlp
    w = W.make_witness(g, cal, np.full(20, 0.5), circuit=cs)
    w2 = W.Witness.from_bytes(w.to_bytes())
    assert w2.circuit_digest == w.circuit_digest
    assert w2.weight_hash == w.weight_hash
    assert np.array_equal(w2.instance, w.instance)
    assert np.array_equal(w2.trace, w.trace)


def test_witnessing_cheap_relative_to_plain_quantized_run(small_mlp):
    g, cal, cs, wvec = small_mlp
    x = np.full(20, 0.125)
    t0 = time.perf_counter()
    for _ in range(5):
        W.run_quantized(g, cal, x, circuit=cs)
    base = time.perf_counter() - t0
    t0 = time.perf_counter()
    for _ in range(5):
        W.make_witness(g, cal, x, circuit=cs)
    full = time.perf_counter() - t0
    assert full <= 100 * base + 0.05  # small floor for timer noise
