"""Challenge/response adjudication and audit-policy tests."""

from fractions import Fraction

import numpy as np
import pytest

import zkeval.calibration as C
from zkeval import challenge as CH
from zkeval import circuit as Z
from zkeval import graph as G
from zkeval import prover as P
from zkeval import witness as W
from zkeval.errors import ChallengeFailure

from test_graph import mlp_doc
from test_calibrate import _samples


@pytest.fixture(scope="module")
def deployed():
    g = G.load_graph(mlp_doc(in_dim=16, hidden=6, out_dim=3, seed=31))
    cal = C.calibrate(g, _samples((16,), n=6, seed=4), mode="resources")
    cs = Z.lower_graph(g, cal)
    pk, vk = P.setup(cs, g.weights)
    return g, cal, cs, pk, vk


def _request(g, cal, cs, x, tolerance=None, nonce="n-1", y_star=None):
    if y_star is None:
        y, _ = W.run_quantized(g, cal, x, circuit=cs)
        y_star = y / float(1 << cs.scale)
    import hashlib
    return CH.ChallengeRequest(
        x_star=x, y_star=np.asarray(y_star),
        tolerance=cal.error_bound if tolerance is None else tolerance,
        nonce=nonce, vk_digest="")


def test_self_consistent_challenge_passes(deployed):
    g, cal, cs, pk, vk = deployed
    x = np.full(16, 0.25)
    req = _request(g, cal, cs, x)
    resp = CH.respond(pk, None, req)
    verdict = CH.adjudicate(vk, req, resp)
    assert verdict.passed, verdict.reason


def test_float_output_challenge_passes_at_calibrated_tolerance(deployed):
    g, cal, cs, pk, vk = deployed
    rng = np.random.default_rng(5)
    x = np.round(rng.uniform(-1, 1, 16) * 16) / 16
    req = _request(g, cal, cs, x, y_star=G.infer_float(g, x),
                   tolerance=cal.error_bound)
    resp = CH.respond(pk, None, req)
    assert CH.adjudicate(vk, req, resp).passed


def test_fabricated_output_fails(deployed):
    g, cal, cs, pk, vk = deployed
    x = np.full(16, 0.25)
    y, _ = W.run_quantized(g, cal, x, circuit=cs)
    fake = y / float(1 << cs.scale) + 5.0
    req = _request(g, cal, cs, x, y_star=fake)
    with pytest.raises(ChallengeFailure):
        CH.respond(pk, None, req)


def test_adjudication_tolerance_check(deployed):
    g, cal, cs, pk, vk = deployed
    x = np.full(16, 0.125)
    req = _request(g, cal, cs, x)
    resp = CH.respond(pk, None, req)
    # same valid proof, but the challenged output drifts outside tolerance
    req_far = _request(g, cal, cs, x, nonce=req.nonce,
                       y_star=np.asarray(req.y_star) + 1.0)
    verdict = CH.adjudicate(vk, req_far, resp)
    assert not verdict.passed and verdict.reason == "tolerance"


def test_response_bound_to_nonce(deployed):
    g, cal, cs, pk, vk = deployed
    x = np.full(16, 0.25)
    req = _request(g, cal, cs, x, nonce="n-A")
    resp = CH.respond(pk, None, req)
    req_other = _request(g, cal, cs, x, nonce="n-B")
    verdict = CH.adjudicate(vk, req_other, resp)
    assert not verdict.passed and verdict.reason.startswith("invalid_proof")


def test_volkswagen_scenario(deployed):
    # provider B (different weights, same architecture) answers challenges
    # issued against provider A's attested key
    g, cal, cs, pk, vk = deployed
    g2 = G.load_graph(mlp_doc(in_dim=16, hidden=6, out_dim=3, seed=97))
    cal2 = C.calibrate(g2, _samples((16,), n=6, seed=4), mode="resources")
    cs2 = Z.lower_graph(g2, cal2)
    pk2, vk2 = P.setup(cs2, g2.weights)
    x = np.full(16, 0.5)
    y2, _ = W.run_quantized(g2, cal2, x, circuit=cs2)
    req = _request(g2, cal2, cs2, x, tolerance=0.5)
    resp = CH.respond(pk2, None, req)
    assert CH.adjudicate(vk2, req, resp).passed      # fine under its own key
    verdict = CH.adjudicate(vk, req, resp)           # Volkswagen attempt
    assert not verdict.passed and verdict.reason == "hash_mismatch"


def test_request_response_serialization(deployed, tmp_path):
    g, cal, cs, pk, vk = deployed
    x = np.full(16, 0.25)
    req = _request(g, cal, cs, x)
    resp = CH.respond(pk, None, req)
    req.save(tmp_path / "req.json")
    resp.save(tmp_path / "resp.json")
    req2 = CH.ChallengeRequest.load(tmp_path / "req.json")
    resp2 = CH.ChallengeResponse.load(tmp_path / "resp.json")
    assert CH.adjudicate(vk, req2, resp2).passed


# ---------------------------------------------------------------------------
# Audit policy


def test_policy_p_one_audits_everything():
    policy = CH.AuditPolicy(1, 10)
    decisions = [a for _, a in CH.schedule_audits(500, policy, seed=1)]
    assert all(decisions)
    assert policy.reward == 10


def test_audit_count_within_three_sigma():
    policy = CH.AuditPolicy("1/10", 1)
    n = 100_000
    count = sum(a for _, a in CH.schedule_audits(n, policy, seed=7))
    sigma = (n * 0.1 * 0.9) ** 0.5
    assert abs(count - n * 0.1) <= 3 * sigma


def test_cost_balance_examples():
    policy = CH.AuditPolicy("1/10", 10)
    report = CH.expected_cost_balance(policy, 100)
    assert report["user_cost"] == 100
    assert report["reward_per_failure"] == 100
    assert CH.AuditPolicy(1, 7).reward == 7


def test_reward_times_p_identity_across_sweep():
    for denom in range(1, 101):
        policy = CH.AuditPolicy(Fraction(1, denom), Fraction(173, 7))
        assert policy.reward * policy.p == policy.cost
        assert CH.expected_cost_balance(policy, 13)["reward_times_p_equals_cost"]


def test_detection_probability_closed_form_vs_monte_carlo():
    grid = [(0.05, 0.2, 50), (0.1, 0.5, 20), (0.3, 1.0, 10), (0.02, 0.1, 400)]
    for p, f, n in grid:
        closed = CH.detection_probability(p, f, n)
        mc = CH.simulate_detection(p, f, n, trials=200_000, seed=3)
        assert abs(closed - mc) <= 0.02
