"""Setup/prove/verify tests: completeness, binding, soundness, determinism."""

import numpy as np
import pytest

import zkeval.calibration as C
from zkeval import circuit as Z
from zkeval import graph as G
from zkeval import prover as P
from zkeval import witness as W
from zkeval.errors import UnsatisfiedWitness, WitnessMismatch

from test_graph import mlp_doc
from test_calibrate import _samples


@pytest.fixture(scope="module")
def compiled():
    g = G.load_graph(mlp_doc(in_dim=20, hidden=8, out_dim=3))
    cal = C.calibrate(g, _samples((20,), n=6), mode="resources")
    cs = Z.lower_graph(g, cal)
    pk, vk = P.setup(cs, g.weights)
    return g, cal, cs, pk, vk


def _witness(g, cal, cs, x=None, seed=0):
    if x is None:
        rng = np.random.default_rng(seed)
        x = np.round(rng.uniform(-1, 1, 20) * 16) / 16
    return W.make_witness(g, cal, x, circuit=cs)


def test_setup_is_deterministic(compiled):
    g, cal, cs, pk, vk = compiled
    pk2, vk2 = P.setup(cs, g.weights)
    assert vk2.to_bytes() == vk.to_bytes()
    assert pk2.to_bytes() == pk.to_bytes()


def test_vk_small_pk_large(compiled):
    g, cal, cs, pk, vk = compiled
    assert len(vk.to_bytes()) <= 16 * 1024
    assert pk.size_bytes > 100 * len(vk.to_bytes())


def test_different_weights_different_roots(compiled):
    g, cal, cs, pk, vk = compiled
    weights2 = {k: t.data.copy() for k, t in g.weights.items()}
    first = next(iter(weights2))
    weights2[first] = weights2[first].copy()
    weights2[first].reshape(-1)[0] += 0.5
    _, vk2 = P.setup(cs, weights2)
    assert vk2.weight_root != vk.weight_root
    assert vk2.weight_hash != vk.weight_hash


@pytest.mark.parametrize("mode", ["audit", "spot_check"])
def test_honest_proof_verifies(compiled, mode):
    g, cal, cs, pk, vk = compiled
    w = _witness(g, cal, cs)
    proof = P.prove(pk, w, mode=mode)
    res = P.verify(vk, proof, w.x_tilde, w.y_tilde)
    assert res.ok, res.reason


def test_proof_round_trips_through_bytes(compiled):
    g, cal, cs, pk, vk = compiled
    for mode in ("audit", "spot_check"):
        w = _witness(g, cal, cs, seed=3)
        proof = P.prove(pk, w, mode=mode)
        proof2 = P.Proof.from_bytes(proof.to_bytes())
        assert proof2.to_bytes() == proof.to_bytes()
        assert P.verify(vk, proof2, w.x_tilde, w.y_tilde).ok


def test_wrong_public_output_rejected(compiled):
    g, cal, cs, pk, vk = compiled
    w = _witness(g, cal, cs, seed=5)
    proof = P.prove(pk, w)
    y_bad = w.y_tilde.copy()
    y_bad[0] += 1
    assert not P.verify(vk, proof, w.x_tilde, y_bad).ok


def test_refuses_to_prove_lying_witness(compiled):
    g, cal, cs, pk, vk = compiled
    w = _witness(g, cal, cs, seed=6)
    w.instance[cs.instance_meta["n_x"]] += 1
    with pytest.raises(UnsatisfiedWitness):
        P.prove(pk, w)


def test_witness_for_other_circuit_rejected(compiled):
    g, cal, cs, pk, vk = compiled
    w = _witness(g, cal, cs, seed=7)
    w.circuit_digest = b"\x00" * 32
    with pytest.raises(WitnessMismatch):
        P.prove(pk, w)


def test_audit_mode_rejects_any_single_cell_mutation(compiled):
    g, cal, cs, pk, vk = compiled
    w = _witness(g, cal, cs, seed=8)
    rng = np.random.default_rng(0)
    for c in rng.choice(cs.n_cells, size=25, replace=False):
        bad = W.Witness(w.circuit_digest, w.weight_hash, w.scale, w.n_x, w.n_y,
                        w.instance.copy(), w.trace.copy())
        bad.trace[c] += 1
        proof = P.prove(pk, bad, mode="audit", _skip_check=True)
        res = P.verify(vk, proof, bad.x_tilde, bad.y_tilde)
        assert not res.ok and res.reason.startswith("constraint_violated")


def test_spot_mode_lying_public_rejection_rate_matches_formula(compiled):
    # One violated row among padded_rows: tamper one public output slot so
    # exactly its final membership row breaks, then vary the transcript.
    g, cal, cs, pk, vk = compiled
    w = _witness(g, cal, cs, seed=9)
    w.instance[cs.instance_meta["n_x"]] += 1  # lie in y, trace untouched
    n = cs.padded_rows
    lam = 4
    q = P.q_rows(lam, P.DEFAULT_FRACTION, n)
    expected = 1 - (1 - 1 / n) ** q
    trials, rejected = 400, 0
    for t in range(trials):
        proof = P.prove(pk, w, mode="spot_check", lam=lam,
                        binding=t.to_bytes(4, "little"), _skip_check=True)
        res = P.verify(vk, proof, w.x_tilde, w.y_tilde,
                       binding=t.to_bytes(4, "little"))
        rejected += 0 if res.ok else 1
    assert abs(rejected / trials - expected) <= 0.05


def test_byte_flip_fuzz_rejected(compiled):
    g, cal, cs, pk, vk = compiled
    w = _witness(g, cal, cs, seed=10)
    proof = P.prove(pk, w)
    blob = bytearray(proof.to_bytes())
    rng = np.random.default_rng(1)
    accepted = 0
    for _ in range(400):
        pos = rng.integers(0, len(blob))
        bit = 1 << rng.integers(0, 8)
        blob[pos] ^= bit
        try:
            mutated = P.Proof.from_bytes(bytes(blob))
            if P.verify(vk, mutated, w.x_tilde, w.y_tilde).ok:
                accepted += 1
        except Exception:
            pass
        blob[pos] ^= bit
    assert accepted == 0


def test_binding_context_is_enforced(compiled):
    g, cal, cs, pk, vk = compiled
    w = _witness(g, cal, cs, seed=11)
    proof = P.prove(pk, w, binding=b"ctx-A")
    assert P.verify(vk, proof, w.x_tilde, w.y_tilde, binding=b"ctx-A").ok
    assert not P.verify(vk, proof, w.x_tilde, w.y_tilde, binding=b"ctx-B").ok


def test_proof_from_other_weights_fails_under_original_vk(compiled):
    g, cal, cs, pk, vk = compiled
    # same architecture, different weights: its own proofs are fine, but they
    # must not verify against the original key
    g2 = G.load_graph(mlp_doc(in_dim=20, hidden=8, out_dim=3, seed=99))
    cal2 = C.calibrate(g2, _samples((20,), n=6), mode="resources")
    cs2 = Z.lower_graph(g2, cal2)
    pk2, vk2 = P.setup(cs2, g2.weights)
    w2 = W.make_witness(g2, cal2, np.zeros(20), circuit=cs2)
    proof2 = P.prove(pk2, w2)
    assert P.verify(vk2, proof2, w2.x_tilde, w2.y_tilde).ok
    res = P.verify(vk, proof2, w2.x_tilde, w2.y_tilde)
    assert not res.ok and "mismatch" in res.reason
