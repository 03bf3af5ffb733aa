"""Challenge/response auditing of production inference, plus audit economics.

A challenger who saw an input/output pair can demand a proof that the
attested model (same weight digest, same circuit) reproduces that output
within a tolerance.  Responses are bound to the challenge nonce through the
proof transcript, so they cannot be replayed across challenges.  The policy
helpers quantify random-audit schedules: detection probability against a
provider that cheats on a fraction of traffic, and the reward level that
covers audit costs in expectation.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from random import Random

import numpy as np

from .errors import ChallengeFailure, DomainError
from .prover import Proof, ProvingKey, VerificationKey, prove, verify
from .witness import Witness, encode_inputs, encode_weight_vector, execute


@dataclass
class ChallengeRequest:
    x_star: np.ndarray          # the observed input (real-valued)
    y_star: np.ndarray          # the claimed output to reproduce
    tolerance: float            # relative tolerance (calibration bound by default)
    nonce: str
    vk_digest: str              # hex id of the verification key being challenged

    def binding(self) -> bytes:
        return b"zkeval/challenge:" + self.nonce.encode()

    def to_json(self) -> str:
        return json.dumps({
            "x_star": np.asarray(self.x_star).reshape(-1).tolist(),
            "x_shape": list(np.asarray(self.x_star).shape),
            "y_star": np.asarray(self.y_star).reshape(-1).tolist(),
            "tolerance": self.tolerance,
            "nonce": self.nonce,
            "vk_digest": self.vk_digest,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ChallengeRequest":
        doc = json.loads(text)
        x = np.asarray(doc["x_star"]).reshape(doc["x_shape"])
        return cls(x, np.asarray(doc["y_star"]), doc["tolerance"],
                   doc["nonce"], doc["vk_digest"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ChallengeRequest":
        return cls.from_json(Path(path).read_text())


@dataclass
class ChallengeResponse:
    proof: Proof
    weight_hash: bytes
    y_units: np.ndarray         # quantized outputs the prover stands behind
    scale: int

    def decoded(self) -> np.ndarray:
        return self.y_units / float(1 << self.scale)

    def to_json(self) -> str:
        return json.dumps({
            "proof_b64": base64.b64encode(self.proof.to_bytes()).decode(),
            "weight_hash": self.weight_hash.hex(),
            "y_units": self.y_units.tolist(),
            "scale": self.scale,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ChallengeResponse":
        doc = json.loads(text)
        return cls(Proof.from_bytes(base64.b64decode(doc["proof_b64"])),
                   bytes.fromhex(doc["weight_hash"]),
                   np.asarray(doc["y_units"], dtype=np.int64), doc["scale"])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "ChallengeResponse":
        return cls.from_json(Path(path).read_text())


def _relative_gap(decoded: np.ndarray, y_star: np.ndarray) -> float:
    y_star = np.asarray(y_star, dtype=np.float64).reshape(-1)
    return float(np.max(np.abs(decoded.reshape(-1) - y_star))
                 / max(float(np.max(np.abs(y_star))), 1e-9))


def respond(pk: ProvingKey, weights, req: ChallengeRequest) -> ChallengeResponse:
    """Prove the challenged pair with the key-holder's own weights.

    Refuses (ChallengeFailure) when the quantized model cannot reproduce
    y_star within the requested tolerance - a well-behaved prover does not
    sign a claim it cannot meet.
    """
    cs = pk.cs
    vec = (pk.weights_signed if weights is None
           else encode_weight_vector(weights, cs.weight_layout))
    if not np.array_equal(vec, pk.weights_signed):
        raise ChallengeFailure("supplied weights do not match the proving key")
    try:
        x_units = encode_inputs(cs, req.x_star)
        asg = execute(cs, x_units, vec)
    except (DomainError, OverflowError) as e:
        raise ChallengeFailure(f"challenged input is outside the calibrated "
                               f"envelope: {e}") from e
    w = Witness(circuit_digest=cs.digest(), weight_hash=pk.vk.weight_hash,
                scale=cs.scale, n_x=cs.instance_meta["n_x"],
                n_y=cs.instance_meta["n_y"], instance=asg.instance.copy(),
                trace=asg.trace)
    decoded = w.y_tilde / float(1 << cs.scale)
    gap = _relative_gap(decoded, req.y_star)
    if gap > req.tolerance:
        raise ChallengeFailure(
            f"cannot reproduce the claimed output within tolerance "
            f"({gap:.4f} > {req.tolerance:.4f})")
    proof = prove(pk, w, mode="spot_check", binding=req.binding())
    return ChallengeResponse(proof, pk.vk.weight_hash, w.y_tilde.copy(), cs.scale)


@dataclass
class Verdict:
    passed: bool
    reason: str

    def __bool__(self) -> bool:
        return self.passed


def adjudicate(vk: VerificationKey, req: ChallengeRequest,
               resp: ChallengeResponse) -> Verdict:
    """Pass iff the proof verifies, the weight digests match, and the
    responded output is within tolerance of the challenged one."""
    if resp.weight_hash != vk.weight_hash:
        return Verdict(False, "hash_mismatch")
    if resp.proof.weight_hash != vk.weight_hash:
        return Verdict(False, "hash_mismatch")
    try:
        from .circuit import system_from_blob
        cs = system_from_blob(resp.proof.blob)
        x_units = encode_inputs(cs, req.x_star)
    except Exception:
        return Verdict(False, "input_mismatch")
    res = verify(vk, resp.proof, x_units, resp.y_units, binding=req.binding())
    if not res.ok:
        return Verdict(False, f"invalid_proof:{res.reason}")
    if _relative_gap(resp.decoded(), req.y_star) > req.tolerance:
        return Verdict(False, "tolerance")
    return Verdict(True, "pass")


# ---------------------------------------------------------------------------
# Random-audit policy economics


@dataclass(frozen=True)
class AuditPolicy:
    """Audit probability p, per-proof cost c, and the cost-covering reward."""

    p: Fraction
    cost: Fraction

    def __init__(self, p, cost):
        p = Fraction(str(p)) if isinstance(p, float) else Fraction(p)
        cost = Fraction(str(cost)) if isinstance(cost, float) else Fraction(cost)
        if not 0 < p <= 1:
            raise ValueError("audit probability must be in (0, 1]")
        object.__setattr__(self, "p", p)
        object.__setattr__(self, "cost", cost)

    @property
    def reward(self) -> Fraction:
        """Reward per caught failure that covers audit spend in expectation."""
        return self.cost / self.p


def schedule_audits(inferences, policy: AuditPolicy, seed: int):
    """Deterministic i.i.d. Bernoulli(p) audit decisions over a stream.

    ``inferences`` is an iterable (or an int meaning that many anonymous
    inferences); yields (item, audited) pairs.
    """
    rng = Random(seed)
    p = float(policy.p)
    stream = range(inferences) if isinstance(inferences, int) else inferences
    for item in stream:
        yield item, rng.random() < p


def expected_cost_balance(policy: AuditPolicy, n: int) -> dict:
    """Cost ledger for n inferences under a random-audit policy.

    One caught failure at the stated reward repays 1/p audits' cost; who
    bears the per-audit cost when an audit passes is a deployment decision,
    so both allocations are reported.
    """
    user_cost = policy.p * n * policy.cost
    return {
        "n_inferences": n,
        "expected_audits": policy.p * n,
        "user_cost": user_cost,
        "reward_per_failure": policy.reward,
        "audits_repaid_by_one_catch": Fraction(1, 1) / policy.p,
        "provider_cost_if_provider_pays": user_cost,
        "reward_times_p_equals_cost": policy.reward * policy.p == policy.cost,
    }


def detection_probability(p: float, f: float, n: int) -> float:
    """Chance a provider cheating on a fraction f of n inferences is caught."""
    return 1.0 - (1.0 - p * f) ** n


def simulate_detection(p: float, f: float, n: int, trials: int, seed: int = 0) -> float:
    """Monte Carlo estimate of :func:`detection_probability`.

    A trial is detected iff some audited inference is a cheated one; the
    first such event is geometric with rate p*f.
    """
    rate = p * f
    if rate <= 0:
        return 0.0
    rng = np.random.default_rng(seed)
    first_hit = rng.geometric(rate, size=trials)
    return float(np.mean(first_hit <= n))
