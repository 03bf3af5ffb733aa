"""Verifiable evaluation attestations: naive bundles and metric aggregation.

Two publishable forms:

* ``NaiveBundle`` - a zip of per-sample proofs plus the verification key and
  public quantized outputs; any reader can recompute performance metrics
  from the included witness outputs.

* ``MetricAttestation`` - proves only the aggregate metric.  A metric
  circuit (built from the same argument families as inference circuits)
  constrains per-sample correctness indicators from privately supplied
  model outputs against public ground truths; per-sample outputs never
  appear in the serialized attestation.  Inner inference proofs are
  verified natively by the aggregator and their digests are absorbed into
  the metric proof's transcript, so the attestation is bound to exactly
  those proofs.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zipfile
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .calibration import _encode_vec
from .circuit import INSTANCE, CircuitBuilder, ConstraintSystem
from .errors import HashMismatch, InvalidProof, MetricUnsupported, SchemaError
from .merkle import EMPTY_LEAF
from .prover import Proof, VerificationKey, prove, setup, verify
from .witness import Witness, execute

METRIC_KINDS = ("accuracy", "mean_abs_error", "confusion_matrix")
ATTESTATION_MAGIC = b"ZKAT"


@dataclass
class BundleEntry:
    sample_id: str
    proof: Proof
    ground_truth: object  # class index (classification) or target value(s)

    @property
    def x_units(self) -> np.ndarray:
        return self.proof.x_units

    @property
    def y_units(self) -> np.ndarray:
        return self.proof.y_units


@dataclass
class NaiveBundle:
    vk: VerificationKey
    entries: list[BundleEntry]
    manifest: dict


@dataclass
class BundleReport:
    entries: list[dict]
    n_total: int
    n_valid: int
    weight_hash: str
    hash_consistent: bool
    invalid_present: bool
    metrics: dict

    @property
    def all_valid(self) -> bool:
        return self.n_valid == self.n_total and self.hash_consistent


def _predicted_class(y_units: np.ndarray) -> int:
    return int(np.argmax(y_units))


def _metric_over(entries, valid_mask, scale: int, kind: str, n_classes: int | None):
    """Recompute an aggregate metric from bundle publics (valid subset only)."""
    chosen = [e for e, ok in zip(entries, valid_mask) if ok]
    if not chosen:
        return {}
    out: dict = {}
    if kind == "accuracy":
        correct = sum(1 for e in chosen
                      if _predicted_class(e.y_units) == int(e.ground_truth))
        out["accuracy"] = correct / len(chosen)
        out["accuracy_exact"] = [correct, len(chosen)]
    elif kind == "mean_abs_error":
        total = 0.0
        for e in chosen:
            y = e.y_units / float(1 << scale)
            gt = np.asarray(e.ground_truth, dtype=np.float64).reshape(-1)
            total += float(np.mean(np.abs(y - gt)))
        out["mean_abs_error"] = total / len(chosen)
    elif kind == "confusion_matrix":
        k = n_classes or (max(int(e.ground_truth) for e in chosen) + 1)
        mat = np.zeros((k, k), dtype=int)
        for e in chosen:
            mat[_predicted_class(e.y_units), int(e.ground_truth)] += 1
        out["confusion_matrix"] = mat.tolist()
    else:
        raise MetricUnsupported(kind)
    return out


def build_bundle(vk: VerificationKey, entries: list[BundleEntry], *,
                 dataset_digest: str = "", metric: str = "accuracy",
                 n_classes: int | None = None, created: str = "") -> NaiveBundle:
    """Package per-sample proofs; every entry must verify under the one key."""
    if not entries:
        raise ValueError("bundle needs at least one entry")
    if metric not in METRIC_KINDS:
        raise MetricUnsupported(metric)
    for e in entries:
        if e.proof.weight_hash != vk.weight_hash:
            raise HashMismatch(f"entry {e.sample_id!r} proves a different model")
        res = verify(vk, e.proof)
        if not res.ok:
            raise InvalidProof(f"entry {e.sample_id!r}: {res.reason}")
    manifest = {
        "format": "zkeval-bundle/1",
        "dataset_digest": dataset_digest,
        "weight_hash": vk.weight_hash.hex(),
        "metric": metric,
        "n_classes": n_classes,
        "scale": vk.scale,
        "n_entries": len(entries),
        "created": created,
    }
    return NaiveBundle(vk, list(entries), manifest)


def save_bundle(bundle: NaiveBundle, path) -> None:
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_DEFLATED) as z:
        z.writestr("manifest.json", json.dumps(bundle.manifest, indent=1, sort_keys=True))
        z.writestr("vk.bin", bundle.vk.to_bytes())
        for i, e in enumerate(bundle.entries):
            z.writestr(f"proofs/{i:04d}.bin", e.proof.to_bytes())
            publics = {
                "sample_id": e.sample_id,
                "ground_truth": e.ground_truth,
                "x_units": e.x_units.tolist(),
                "y_units": e.y_units.tolist(),
                "y_decoded": (e.y_units / float(1 << bundle.vk.scale)).tolist(),
            }
            z.writestr(f"publics/{i:04d}.json", json.dumps(publics, sort_keys=True))


def load_bundle(path) -> NaiveBundle:
    with zipfile.ZipFile(path) as z:
        manifest = json.loads(z.read("manifest.json"))
        vk = VerificationKey.from_bytes(z.read("vk.bin"))
        names = sorted(n for n in z.namelist() if n.startswith("proofs/"))
        entries = []
        for name in names:
            idx = name.split("/")[1].split(".")[0]
            publics = json.loads(z.read(f"publics/{idx}.json"))
            entries.append(BundleEntry(
                sample_id=publics["sample_id"],
                proof=Proof.from_bytes(z.read(name)),
                ground_truth=publics["ground_truth"],
            ))
    return NaiveBundle(vk, entries, manifest)


def verify_bundle(bundle) -> BundleReport:
    """Verify every proof, check digest constancy, recompute the metrics.

    Failures never raise: invalid entries are flagged and the metric is
    computed over the valid subset with ``invalid_present`` set.
    """
    if not isinstance(bundle, NaiveBundle):
        bundle = load_bundle(bundle)
    vk = bundle.vk
    rows = []
    valid = []
    for e in bundle.entries:
        res = verify(vk, e.proof)
        hash_ok = e.proof.weight_hash == vk.weight_hash
        ok = bool(res.ok and hash_ok)
        rows.append({"sample_id": e.sample_id, "ok": ok,
                     "reason": res.reason if not res.ok else
                     ("weight_hash_mismatch" if not hash_ok else "ok")})
        valid.append(ok)
    metrics = _metric_over(bundle.entries, valid, vk.scale,
                           bundle.manifest.get("metric", "accuracy"),
                           bundle.manifest.get("n_classes"))
    n_valid = sum(valid)
    return BundleReport(
        entries=rows, n_total=len(rows), n_valid=n_valid,
        weight_hash=vk.weight_hash.hex(),
        hash_consistent=all(e.proof.weight_hash == vk.weight_hash
                            for e in bundle.entries),
        invalid_present=n_valid != len(rows),
        metrics=metrics,
    )


# ---------------------------------------------------------------------------
# Metric circuits


def _instance_refs(n: int, offset: int = 0) -> np.ndarray:
    return ((np.arange(offset, offset + n, dtype=np.int64)) << 2) | INSTANCE


def build_accuracy_circuit(n_samples: int, n_classes: int) -> ConstraintSystem:
    """Count matches between private predictions and public ground truths.

    Instance layout: [gt_0 .. gt_{N-1}, S] with S the number of correct
    predictions.  Per sample: one difference row, one is-zero membership row
    (which also forces the indicator boolean), and one accumulator step.
    """
    b = CircuitBuilder(scale=0)
    gts = _instance_refs(n_samples)
    s_slot = int(_instance_refs(1, n_samples)[0])
    preds = b.free("external", n_samples, label="preds")
    diff = b.elementwise("sub", preds, gts)
    tid = b.table("iszero", 0, 0, lo=-(n_classes + 1), hi=n_classes + 1)
    hits = b.lookup(tid, diff)
    b.cumulative("sum", hits, out_ref=s_slot)
    return b.build({"n_x": n_samples, "n_y": 1,
                    "inputs": [["ground_truths", [n_samples]]],
                    "outputs": [["correct_count", [1], None]]}, [])


def build_mae_circuit(n_samples: int, scale: int, bound_units: int) -> ConstraintSystem:
    """Sum of |prediction - truth| in grid units; divided publicly by N*2^s."""
    b = CircuitBuilder(scale=scale)
    gts = _instance_refs(n_samples)
    s_slot = int(_instance_refs(1, n_samples)[0])
    preds = b.free("external", n_samples, label="preds")
    diff = b.elementwise("sub", preds, gts)
    tid = b.table("abs", scale, scale, lo=-bound_units, hi=bound_units)
    absd = b.lookup(tid, diff)
    b.cumulative("sum", absd, out_ref=s_slot)
    return b.build({"n_x": n_samples, "n_y": 1,
                    "inputs": [["ground_truths", [n_samples]]],
                    "outputs": [["abs_error_sum", [1], None]]}, [])


def build_confusion_circuit(n_samples: int, n_classes: int,
                            ground_truths: list[int]) -> ConstraintSystem:
    """K x K counts; the public truths fix each sample's column statically."""
    b = CircuitBuilder(scale=0)
    gts = np.asarray(ground_truths, dtype=np.int64)
    k = n_classes
    s_slots = _instance_refs(k * k, n_samples)
    preds = b.free("external", n_samples, label="preds")
    tid = b.table("iszero", 0, 0, lo=-(k + 1), hi=k + 1)
    ind = {}
    for a in range(k):
        diff = b.elementwise("sub", preds,
                             np.full(n_samples, b.const(a), dtype=np.int64))
        ind[a] = b.lookup(tid, diff)
    zero = b.const(0)
    for a in range(k):
        for t in range(k):
            slot = int(s_slots[a * k + t])
            members = np.asarray([ind[a][i] for i in range(n_samples)
                                  if int(gts[i]) == t], dtype=np.int64)
            if members.size:
                b.cumulative("sum", members, out_ref=slot)
            else:
                b.elementwise("add", np.asarray([zero]), np.asarray([zero]),
                              out_refs=np.asarray([slot], np.int64))
    return b.build({"n_x": n_samples, "n_y": k * k,
                    "inputs": [["ground_truths", [n_samples]]],
                    "outputs": [["confusion_counts", [k, k], None]]}, [])


# ---------------------------------------------------------------------------
# Metric attestation


@dataclass
class MetricAttestation:
    metric: str
    n_samples: int
    n_classes: int
    scale: int                      # inference output scale (MAE units)
    value: dict                     # exact rational / matrix form
    model_weight_hash: bytes
    model_vk_digest: bytes
    inner_digests: list[bytes]
    ground_truths: list
    metric_vk: bytes
    metric_proof: bytes
    dataset_digest: str = ""

    def binding(self) -> bytes:
        h = hashlib.sha256(b"zkeval/metric-binding")
        h.update(self.model_vk_digest)
        for d in self.inner_digests:
            h.update(d)
        return h.digest()

    def to_bytes(self) -> bytes:
        meta = json.dumps({
            "metric": self.metric, "n_samples": self.n_samples,
            "n_classes": self.n_classes, "scale": self.scale,
            "value": self.value, "ground_truths": self.ground_truths,
            "dataset_digest": self.dataset_digest,
        }, sort_keys=True).encode()
        out = [ATTESTATION_MAGIC, struct.pack("<H", 1)]
        out.append(self.model_weight_hash + self.model_vk_digest)
        out.append(struct.pack("<I", len(self.inner_digests)))
        out.extend(self.inner_digests)
        for blob in (meta, self.metric_vk, self.metric_proof):
            out.append(struct.pack("<Q", len(blob)) + blob)
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "MetricAttestation":
        if blob[:4] != ATTESTATION_MAGIC:
            raise SchemaError("not a metric attestation")
        off = 6
        mwh, mvd = blob[off : off + 32], blob[off + 32 : off + 64]
        off += 64
        (n,) = struct.unpack("<I", blob[off : off + 4])
        off += 4
        digests = [blob[off + 32 * i : off + 32 * (i + 1)] for i in range(n)]
        off += 32 * n
        parts = []
        for _ in range(3):
            (ln,) = struct.unpack("<Q", blob[off : off + 8])
            off += 8
            parts.append(blob[off : off + ln])
            off += ln
        if off != len(blob):
            raise SchemaError("attestation length mismatch")
        meta = json.loads(parts[0])
        return cls(metric=meta["metric"], n_samples=meta["n_samples"],
                   n_classes=meta["n_classes"], scale=meta["scale"],
                   value=meta["value"], model_weight_hash=mwh,
                   model_vk_digest=mvd, inner_digests=digests,
                   ground_truths=meta["ground_truths"], metric_vk=parts[1],
                   metric_proof=parts[2],
                   dataset_digest=meta["dataset_digest"])

    def sidecar(self) -> dict:
        return {
            "metric": self.metric,
            "value": self.value,
            "n_samples": self.n_samples,
            "model_weight_hash": self.model_weight_hash.hex(),
            "model_vk_digest": self.model_vk_digest.hex(),
            "inner_proof_digests": [d.hex() for d in self.inner_digests],
            "dataset_digest": self.dataset_digest,
        }

    def save(self, path) -> None:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        path.with_suffix(path.suffix + ".json").write_text(
            json.dumps(self.sidecar(), indent=1, sort_keys=True))

    @classmethod
    def load(cls, path) -> "MetricAttestation":
        return cls.from_bytes(Path(path).read_bytes())


def _metric_witness(cs: ConstraintSystem, gts_units: np.ndarray,
                    external: dict) -> Witness:
    asg = execute(cs, gts_units, np.empty(0, np.int64), external)
    return Witness(
        circuit_digest=cs.digest(), weight_hash=EMPTY_LEAF, scale=cs.scale,
        n_x=cs.instance_meta["n_x"], n_y=cs.instance_meta["n_y"],
        instance=asg.instance.copy(), trace=asg.trace,
    )


def build_metric_attestation(vk: VerificationKey, witnesses, proofs: list[Proof],
                             ground_truths, metric: str, *,
                             n_classes: int | None = None,
                             dataset_digest: str = "") -> MetricAttestation:
    """Aggregate verified inferences into a single metric proof.

    Inner proofs are verified here (natively), then their digests are bound
    into the metric circuit's transcript.  Per-sample model outputs enter the
    metric circuit as private cells and are not serialized.
    """
    if metric not in METRIC_KINDS:
        raise MetricUnsupported(metric)
    if len(proofs) != len(ground_truths):
        raise ValueError("proofs and ground truths must align")
    for i, p in enumerate(proofs):
        if p.weight_hash != vk.weight_hash:
            raise HashMismatch(f"proof {i} attests a different model")
        res = verify(vk, p)
        if not res.ok:
            raise InvalidProof(f"proof {i}: {res.reason}")

    n = len(proofs)
    digests = [p.digest() for p in proofs]
    model_vk_digest = hashlib.sha256(vk.to_bytes()).digest()

    if metric == "accuracy":
        k = n_classes or vk.n_y
        preds = np.asarray([_predicted_class(p.y_units) for p in proofs], np.int64)
        gts = np.asarray([int(g) for g in ground_truths], np.int64)
        cs = build_accuracy_circuit(n, k)
        wit = _metric_witness(cs, gts, {"preds": preds})
        s_val = int(wit.y_tilde[0])
        value = {"numerator": s_val, "denominator": n}
    elif metric == "mean_abs_error":
        if vk.n_y != 1:
            raise MetricUnsupported("mean_abs_error needs scalar outputs")
        preds = np.asarray([int(p.y_units[0]) for p in proofs], np.int64)
        gts = _encode_vec(np.asarray(ground_truths, np.float64), vk.scale)
        bound = int(np.max(np.abs(preds - gts))) * 2 + 2
        cs = build_mae_circuit(n, vk.scale, bound)
        wit = _metric_witness(cs, gts, {"preds": preds})
        s_val = int(wit.y_tilde[0])
        value = {"abs_error_units": s_val, "scale": vk.scale, "n": n}
        k = n_classes or 0
    else:  # confusion_matrix
        k = n_classes or vk.n_y
        preds = np.asarray([_predicted_class(p.y_units) for p in proofs], np.int64)
        gts = np.asarray([int(g) for g in ground_truths], np.int64)
        cs = build_confusion_circuit(n, k, gts.tolist())
        wit = _metric_witness(cs, gts, {"preds": preds})
        value = {"matrix": wit.y_tilde.reshape(k, k).tolist()}

    pk_m, vk_m = setup(cs, {})
    att = MetricAttestation(
        metric=metric, n_samples=n, n_classes=int(k), scale=vk.scale,
        value=value, model_weight_hash=vk.weight_hash,
        model_vk_digest=model_vk_digest, inner_digests=digests,
        ground_truths=[g if isinstance(g, (int, float)) else float(g)
                       for g in np.asarray(ground_truths).tolist()],
        metric_vk=vk_m.to_bytes(), metric_proof=b"",
        dataset_digest=dataset_digest,
    )
    proof = prove(pk_m, wit, mode="spot_check", binding=att.binding())
    att.metric_proof = proof.to_bytes()
    return att


def verify_metric_attestation(att: MetricAttestation,
                              expected_inner_digests=None,
                              expected_weight_hash: bytes | None = None) -> bool:
    """True iff the metric proof verifies and all bindings are consistent."""
    try:
        if expected_inner_digests is not None:
            if list(expected_inner_digests) != list(att.inner_digests):
                return False
        if expected_weight_hash is not None:
            if att.model_weight_hash != expected_weight_hash:
                return False
        vk_m = VerificationKey.from_bytes(att.metric_vk)
        proof = Proof.from_bytes(att.metric_proof)
        n = att.n_samples
        if att.metric == "accuracy":
            gts = np.asarray([int(g) for g in att.ground_truths], np.int64)
            y = np.asarray([att.value["numerator"]], np.int64)
            if att.value["denominator"] != n:
                return False
        elif att.metric == "mean_abs_error":
            gts = _encode_vec(np.asarray(att.ground_truths, np.float64), att.scale)
            y = np.asarray([att.value["abs_error_units"]], np.int64)
        elif att.metric == "confusion_matrix":
            gts = np.asarray([int(g) for g in att.ground_truths], np.int64)
            mat = np.asarray(att.value["matrix"], np.int64)
            if mat.shape != (att.n_classes, att.n_classes) or mat.sum() != n:
                return False
            y = mat.reshape(-1)
        else:
            return False
        res = verify(vk_m, proof, gts, y, binding=att.binding())
        return bool(res.ok)
    except Exception:
        return False


def attested_value(att: MetricAttestation):
    """The claim as an exact number (Fraction, float, or matrix)."""
    if att.metric == "accuracy":
        return Fraction(att.value["numerator"], att.value["denominator"])
    if att.metric == "mean_abs_error":
        return Fraction(att.value["abs_error_units"],
                        att.value["n"] * (1 << att.value["scale"]))
    return np.asarray(att.value["matrix"])
