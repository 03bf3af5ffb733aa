"""Witness generation: quantized inference traces plus weight digests.

A witness holds the public quantized input/output pair, the full trace of
every argument's operands and accumulators (so proving can happen later and
elsewhere), and the digest binding it to one set of model weights.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibration import CalibrationReport, _encode_vec
from .circuit import Assignment, ConstraintSystem, lower_graph
from .errors import SchemaError, WitnessMismatch
from .graph import Graph, Tensor
from .merkle import EMPTY_LEAF, MerkleTree, merkle_root

WITNESS_MAGIC = b"ZKWT"
WITNESS_VERSION = 1
WEIGHT_CHUNK = 64  # field elements per digest leaf


def signed_to_u64(v: np.ndarray) -> np.ndarray:
    """Field representatives of centered values, as uint64 (vectorized)."""
    v = np.asarray(v, dtype=np.int64)
    u = v.astype(np.uint64)
    # two's-complement wrap differs from mod-p by exactly 2^32 - 1 on negatives
    return np.where(v >= 0, u, u - np.uint64(0xFFFFFFFF))


def encode_weight_vector(weights, layout) -> np.ndarray:
    """Flat signed-unit encoding of all weights in canonical layout order."""
    parts = []
    for name, size, scale in layout:
        if name not in weights:
            raise WitnessMismatch(f"weight tensor {name!r} missing")
        t = weights[name]
        data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        if data.size != size:
            raise WitnessMismatch(f"weight tensor {name!r} has {data.size} values, "
                                  f"layout expects {size}")
        parts.append(_encode_vec(data.reshape(-1), scale))
    if not parts:
        return np.empty(0, dtype=np.int64)
    return np.concatenate(parts)


def weight_chunk_payloads(vec_signed: np.ndarray) -> list[bytes]:
    raw = signed_to_u64(vec_signed).astype("<u8").tobytes()
    step = WEIGHT_CHUNK * 8
    return [raw[i : i + step] for i in range(0, len(raw), step)]


def weight_digest_tree(vec_signed: np.ndarray) -> MerkleTree:
    payloads = weight_chunk_payloads(vec_signed)
    if not payloads:
        return MerkleTree([EMPTY_LEAF], 0)
    return MerkleTree.from_payloads(payloads)


def hash_weights(weights, scales) -> bytes:
    """Merkle digest over the canonical fixed-point encoding of the weights.

    Weights are ordered by name, flattened row-major, encoded to 8-byte
    little-endian field elements, and chunked 64 elements per leaf.  The
    digest is deterministic across platforms and load orders; the empty
    weight set hashes to a fixed sentinel.
    """
    if isinstance(scales, CalibrationReport):
        scale_of = lambda n: scales.weight_scales.get(n, scales.scale)
    elif isinstance(scales, dict):
        scale_of = lambda n: scales[n]
    else:
        scale_of = lambda n: int(scales)
    layout = []
    for name in sorted(weights):
        t = weights[name]
        data = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
        layout.append((name, data.size, scale_of(name)))
    vec = encode_weight_vector(weights, layout)
    return merkle_root(weight_chunk_payloads(vec))


# ---------------------------------------------------------------------------


@dataclass
class Witness:
    """Inputs, outputs, and the full satisfied trace for one inference."""

    circuit_digest: bytes
    weight_hash: bytes
    scale: int
    n_x: int
    n_y: int
    instance: np.ndarray   # signed units, inputs then outputs
    trace: np.ndarray      # signed units, one entry per trace cell

    @property
    def x_tilde(self) -> np.ndarray:
        return self.instance[: self.n_x]

    @property
    def y_tilde(self) -> np.ndarray:
        return self.instance[self.n_x :]

    def decode_outputs(self) -> np.ndarray:
        return self.y_tilde / float(1 << self.scale)

    def to_bytes(self) -> bytes:
        head = struct.pack("<4sH32s32sBIIQ", WITNESS_MAGIC, WITNESS_VERSION,
                           self.circuit_digest, self.weight_hash, self.scale,
                           self.n_x, self.n_y, len(self.trace))
        return head + self.instance.astype("<i8").tobytes() + \
            self.trace.astype("<i8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Witness":
        head_size = struct.calcsize("<4sH32s32sBIIQ")
        magic, ver, cd, wh, scale, n_x, n_y, n_cells = struct.unpack(
            "<4sH32s32sBIIQ", blob[:head_size])
        if magic != WITNESS_MAGIC or ver != WITNESS_VERSION:
            raise SchemaError("not a witness file")
        off = head_size
        n_inst = n_x + n_y
        instance = np.frombuffer(blob, dtype="<i8", count=n_inst, offset=off).copy()
        off += n_inst * 8
        trace = np.frombuffer(blob, dtype="<i8", count=n_cells, offset=off).copy()
        if off + n_cells * 8 != len(blob):
            raise SchemaError("witness file length mismatch")
        return cls(cd, wh, scale, n_x, n_y, instance, trace)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Witness":
        return cls.from_bytes(Path(path).read_bytes())

    def assignment(self, cs: ConstraintSystem, weights_signed: np.ndarray | None = None) -> Assignment:
        """Full-column view; weights are supplied by the key holder."""
        w = np.empty(0, np.int64) if weights_signed is None else weights_signed
        asg = Assignment(cs.n_cells, self.instance.copy(), w, cs.consts)
        asg.trace = np.asarray(self.trace, dtype=np.int64).copy()
        return asg


def encode_inputs(cs: ConstraintSystem, x) -> np.ndarray:
    """Quantize an input (array or dict of arrays) onto the instance slots."""
    meta = cs.instance_meta
    if not isinstance(x, dict):
        if len(meta["inputs"]) != 1:
            raise SchemaError("graph has multiple inputs; pass a dict")
        x = {meta["inputs"][0][0]: x}
    parts = []
    for name, shape in meta["inputs"]:
        arr = np.asarray(x[name], dtype=np.float64)
        if arr.shape != tuple(shape):
            raise SchemaError(f"input {name!r}: got {arr.shape}, want {tuple(shape)}")
        parts.append(_encode_vec(arr.reshape(-1), cs.scale))
    return np.concatenate(parts) if parts else np.empty(0, np.int64)


def execute(cs: ConstraintSystem, x_units: np.ndarray, weights_signed: np.ndarray,
            external: dict | None = None) -> Assignment:
    """Evaluate every region in order, producing a satisfied assignment."""
    instance = np.zeros(cs.n_instance, dtype=np.int64)
    instance[: len(x_units)] = x_units
    asg = Assignment(cs.n_cells, instance, weights_signed, cs.consts)
    for region in cs.regions:
        region.fill(asg, cs, external or {})
    return asg


def run_quantized(g: Graph, cal: CalibrationReport, x, circuit: ConstraintSystem | None = None):
    """Fixed-point forward pass through the compiled constraint layout.

    Returns (y_tilde signed units, assignment).  The trace records every
    argument's operands and accumulators.
    """
    cs = circuit if circuit is not None else lower_graph(g, cal)
    weights = encode_weight_vector(g.weights, cs.weight_layout)
    x_units = encode_inputs(cs, x)
    asg = execute(cs, x_units, weights)
    y = asg.instance[cs.instance_meta["n_x"] :]
    return y, asg


def make_witness(g: Graph, cal: CalibrationReport, x, weights=None,
                 circuit: ConstraintSystem | None = None) -> Witness:
    """Quantized inference plus weight digest; cheap relative to proving."""
    cs = circuit if circuit is not None else lower_graph(g, cal)
    wdict = weights if weights is not None else g.weights
    vec = encode_weight_vector(wdict, cs.weight_layout)
    x_units = encode_inputs(cs, x)
    asg = execute(cs, x_units, vec)
    return Witness(
        circuit_digest=cs.digest(),
        weight_hash=merkle_root(weight_chunk_payloads(vec)),
        scale=cs.scale,
        n_x=cs.instance_meta["n_x"],
        n_y=cs.instance_meta["n_y"],
        instance=asg.instance.copy(),
        trace=asg.trace,
    )
