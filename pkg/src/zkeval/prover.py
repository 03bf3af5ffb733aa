"""Setup / prove / verify over a hash-committed execution trace.

The reference backend commits the witness trace (and, at setup time, the
weight columns and lookup tables) in SHA-256 Merkle trees.  All verifier
randomness is derived from a domain-separated transcript, so proofs are
non-interactive.  Two modes:

    audit       open everything; deterministic rejection of any fault;
                not private (trace and weights travel in the proof)
    spot_check  open q transcript-chosen rows with batched Merkle
                openings; succinct and fast to verify, probabilistically
                sound, leaks only the opened rows

The q formula is ``max(lam, ceil(fraction * padded_rows))`` with lam
defaulting to 128 and fraction to 0.02; both are configurable knobs that
trade proof size against soundness.  There is no trusted setup anywhere:
keys are deterministic functions of the circuit and the weights.
"""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import merkle
from .circuit import (
    CONST,
    INSTANCE,
    K_BOOL,
    K_LOOKUP,
    K_NOOP,
    TRACE,
    WEIGHT,
    ConstraintSystem,
    Row,
    check_satisfied,
    padded_row_count,
    row_holds,
    system_from_blob,
)
from .errors import SchemaError, UnsatisfiedWitness, WitnessMismatch
from .field import from_signed
from .merkle import MerkleTree, leaf_hash, node_hash, root_from_multiproof
from .witness import (
    WEIGHT_CHUNK,
    Witness,
    encode_weight_vector,
    signed_to_u64,
    weight_chunk_payloads,
)

PK_MAGIC = b"ZKPK"
VK_MAGIC = b"ZKVK"
PROOF_MAGIC = b"ZKPF"
FORMAT_VERSION = 1

DEFAULT_LAMBDA = 128
DEFAULT_FRACTION = 0.02
CHUNK_OPENINGS = 16  # digest cross-binding samples per proof

MODE_AUDIT = 0
MODE_SPOT = 1
MODE_NAMES = {MODE_AUDIT: "audit", MODE_SPOT: "spot_check"}


def _leaf_payloads_from_signed(values: np.ndarray) -> bytes:
    return signed_to_u64(values).astype("<u8").tobytes()


def _tree_from_signed(values: np.ndarray, padded: int) -> MerkleTree:
    raw = _leaf_payloads_from_signed(values)
    mv = memoryview(raw)
    sha = hashlib.sha256
    hashes = [sha(b"\x00" + mv[i : i + 8]).digest() for i in range(0, len(raw), 8)]
    hashes.extend([merkle.EMPTY_LEAF] * (padded - len(hashes)))
    return MerkleTree.from_leaf_hashes(hashes, n_real=len(values))


def trace_leaf_count(cs: ConstraintSystem) -> int:
    """Trace commitment width: the padded row count drives proving cost."""
    return max(cs.padded_rows, padded_row_count(max(cs.n_cells, 1)))


def q_rows(lam: int, fraction: float, padded_rows: int) -> int:
    return min(padded_rows, max(lam, math.ceil(fraction * padded_rows)))


# ---------------------------------------------------------------------------
# Transcript


class Transcript:
    """SHA-256 chained transcript with labeled absorption."""

    def __init__(self, domain: bytes = b"zkeval/v1"):
        self._h = hashlib.sha256(domain)

    def absorb(self, label: bytes, data: bytes) -> None:
        self._h.update(struct.pack("<B", len(label)) + label)
        self._h.update(struct.pack("<Q", len(data)) + data)

    def seed(self) -> bytes:
        return self._h.digest()


def _stream_indices(seed: bytes, label: bytes, n: int, count: int) -> list[int]:
    """Distinct indices below n via rejection sampling of a hash stream."""
    count = min(count, n)
    out: list[int] = []
    seen: set[int] = set()
    limit = (1 << 64) - ((1 << 64) % n)
    ctr = 0
    while len(out) < count:
        block = hashlib.sha256(seed + label + struct.pack("<Q", ctr)).digest()
        ctr += 1
        for off in range(0, 32, 8):
            v = int.from_bytes(block[off : off + 8], "little")
            if v >= limit:
                continue
            r = v % n
            if r not in seen:
                seen.add(r)
                out.append(r)
                if len(out) == count:
                    break
    return sorted(out)


def _build_transcript(circuit_digest: bytes, x_units: np.ndarray, y_units: np.ndarray,
                      weight_hash: bytes, trace_root: bytes, weight_root: bytes,
                      table_roots: list[bytes], mode: int, lam: int,
                      fraction_micro: int, binding: bytes) -> bytes:
    t = Transcript()
    t.absorb(b"circuit", circuit_digest)
    t.absorb(b"pub_x", x_units.astype("<i8").tobytes())
    t.absorb(b"pub_y", y_units.astype("<i8").tobytes())
    t.absorb(b"weight_hash", weight_hash)
    t.absorb(b"root_trace", trace_root)
    t.absorb(b"root_weights", weight_root)
    t.absorb(b"root_tables", b"".join(table_roots))
    t.absorb(b"mode", struct.pack("<BII", mode, lam, fraction_micro))
    t.absorb(b"bind", binding)
    return t.seed()


# ---------------------------------------------------------------------------
# Keys


@dataclass
class VerificationKey:
    circuit_digest: bytes
    lam: int
    scale: int
    n_con: int
    padded_rows: int
    n_cells: int
    n_x: int
    n_y: int
    n_weights: int
    weight_root: bytes    # per-element commitment
    weight_hash: bytes    # chunked digest H(W); the public model identity
    table_roots: list[bytes]

    def to_bytes(self) -> bytes:
        head = struct.pack("<4sHIBQQQIIQ", VK_MAGIC, FORMAT_VERSION, self.lam,
                           self.scale, self.n_con, self.padded_rows, self.n_cells,
                           self.n_x, self.n_y, self.n_weights)
        body = self.circuit_digest + self.weight_root + self.weight_hash
        body += struct.pack("<H", len(self.table_roots)) + b"".join(self.table_roots)
        return head + body

    @classmethod
    def from_bytes(cls, blob: bytes) -> "VerificationKey":
        head = struct.calcsize("<4sHIBQQQIIQ")
        magic, ver, lam, scale, n_con, padded, n_cells, n_x, n_y, n_w = struct.unpack(
            "<4sHIBQQQIIQ", blob[:head])
        if magic != VK_MAGIC or ver != FORMAT_VERSION:
            raise SchemaError("not a verification key")
        off = head
        cd, wr, wh = blob[off : off + 32], blob[off + 32 : off + 64], blob[off + 64 : off + 96]
        off += 96
        (nt,) = struct.unpack("<H", blob[off : off + 2])
        off += 2
        roots = [blob[off + 32 * i : off + 32 * (i + 1)] for i in range(nt)]
        if off + 32 * nt != len(blob):
            raise SchemaError("verification key length mismatch")
        return cls(cd, lam, scale, n_con, padded, n_cells, n_x, n_y, n_w, wr, wh, roots)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "VerificationKey":
        return cls.from_bytes(Path(path).read_bytes())


@dataclass
class ProvingKey:
    vk: VerificationKey
    cs: ConstraintSystem
    weights_signed: np.ndarray
    element_tree: MerkleTree
    chunk_tree: MerkleTree
    table_trees: list[MerkleTree]

    @property
    def size_bytes(self) -> int:
        return len(self.to_bytes())

    def to_bytes(self) -> bytes:
        sections = [
            self.vk.to_bytes(),
            self.cs.core_blob(),
            self.cs.settings_json.encode(),
            self.weights_signed.astype("<i8").tobytes(),
            self.element_tree.serialize(),
            self.chunk_tree.serialize(),
        ]
        sections.append(struct.pack("<H", len(self.table_trees)))
        for t in self.table_trees:
            blob = t.serialize()
            sections.append(struct.pack("<QQ", t.n_real, len(blob)) + blob)
        out = [PK_MAGIC, struct.pack("<H", FORMAT_VERSION)]
        for s in sections[:6]:
            out.append(struct.pack("<Q", len(s)) + s)
        out.extend(sections[6:])
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ProvingKey":
        if blob[:4] != PK_MAGIC or struct.unpack("<H", blob[4:6])[0] != FORMAT_VERSION:
            raise SchemaError("not a proving key")
        off = 6
        parts = []
        for _ in range(6):
            (n,) = struct.unpack("<Q", blob[off : off + 8])
            off += 8
            parts.append(blob[off : off + n])
            off += n
        vk = VerificationKey.from_bytes(parts[0])
        cs = system_from_blob(parts[1], settings_json=parts[2].decode())
        weights = np.frombuffer(parts[3], dtype="<i8").copy()
        element_tree = MerkleTree.deserialize(parts[4], max(vk.n_weights, 1))
        n_chunks = max(1, -(-vk.n_weights // WEIGHT_CHUNK)) if vk.n_weights else 0
        chunk_tree = MerkleTree.deserialize(parts[5], max(n_chunks, 1))
        (nt,) = struct.unpack("<H", blob[off : off + 2])
        off += 2
        trees = []
        for _ in range(nt):
            n_real, n = struct.unpack("<QQ", blob[off : off + 16])
            off += 16
            trees.append(MerkleTree.deserialize(blob[off : off + n], n_real))
            off += n
        if off != len(blob):
            raise SchemaError("proving key length mismatch")
        return cls(vk, cs, weights, element_tree, chunk_tree, trees)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ProvingKey":
        return cls.from_bytes(Path(path).read_bytes())


def setup(cs: ConstraintSystem, weights, lam: int = DEFAULT_LAMBDA) -> tuple[ProvingKey, VerificationKey]:
    """Deterministic key generation from the circuit and the private weights.

    The verification key stays kilobyte-sized regardless of model size; the
    proving key holds the committed weight columns and the precomputed
    lookup-table trees and grows with the model.
    """
    vec = (weights if isinstance(weights, np.ndarray)
           else encode_weight_vector(weights, cs.weight_layout))
    element_tree = _tree_from_signed(vec, padded_row_count(max(len(vec), 1)))
    chunks = weight_chunk_payloads(vec)
    chunk_tree = (MerkleTree.from_payloads(chunks) if chunks
                  else MerkleTree([merkle.EMPTY_LEAF], 0))
    table_trees = [MerkleTree.from_payloads(t.leaf_payloads()) for t in cs.tables]
    vk = VerificationKey(
        circuit_digest=cs.digest(), lam=lam, scale=cs.scale, n_con=cs.n_con,
        padded_rows=cs.padded_rows, n_cells=cs.n_cells,
        n_x=cs.instance_meta["n_x"], n_y=cs.instance_meta["n_y"],
        n_weights=len(vec),
        weight_root=element_tree.root if len(vec) else merkle.EMPTY_LEAF,
        weight_hash=chunk_tree.root if chunks else merkle.EMPTY_LEAF,
        table_roots=[t.root for t in table_trees],
    )
    pk = ProvingKey(vk, cs, vec, element_tree, chunk_tree, table_trees)
    return pk, vk


# ---------------------------------------------------------------------------
# Proofs


@dataclass
class Proof:
    mode: int
    lam: int
    fraction_micro: int
    circuit_digest: bytes
    weight_hash: bytes
    x_units: np.ndarray
    y_units: np.ndarray
    trace_root: bytes
    seed: bytes
    blob: bytes
    # audit mode payloads
    full_trace: np.ndarray | None = None
    full_weights: np.ndarray | None = None
    # spot-check payloads
    trace_values: np.ndarray | None = None
    trace_aux: list[bytes] | None = None
    weight_values: np.ndarray | None = None
    weight_aux: list[bytes] | None = None
    table_aux: list[list[bytes]] | None = None
    chunk_payloads: list[bytes] | None = None
    chunk_paths: list[list[bytes]] | None = None
    subtree_paths: list[list[bytes]] | None = None

    @property
    def mode_name(self) -> str:
        return MODE_NAMES[self.mode]

    def to_bytes(self) -> bytes:
        out = [PROOF_MAGIC, struct.pack("<HBII", FORMAT_VERSION, self.mode,
                                        self.lam, self.fraction_micro)]
        out.append(struct.pack("<II", len(self.x_units), len(self.y_units)))
        out.append(self.circuit_digest + self.weight_hash + self.trace_root + self.seed)
        out.append(self.x_units.astype("<i8").tobytes())
        out.append(self.y_units.astype("<i8").tobytes())
        out.append(struct.pack("<Q", len(self.blob)) + self.blob)
        if self.mode == MODE_AUDIT:
            out.append(struct.pack("<Q", len(self.full_trace)))
            out.append(self.full_trace.astype("<i8").tobytes())
            out.append(struct.pack("<Q", len(self.full_weights)))
            out.append(self.full_weights.astype("<i8").tobytes())
        else:
            out.append(struct.pack("<Q", len(self.trace_values)))
            out.append(self.trace_values.astype("<i8").tobytes())
            out.append(struct.pack("<Q", len(self.trace_aux)))
            out.extend(self.trace_aux)
            out.append(struct.pack("<Q", len(self.weight_values)))
            out.append(self.weight_values.astype("<i8").tobytes())
            out.append(struct.pack("<Q", len(self.weight_aux)))
            out.extend(self.weight_aux)
            out.append(struct.pack("<H", len(self.table_aux)))
            for aux in self.table_aux:
                out.append(struct.pack("<Q", len(aux)))
                out.extend(aux)
            out.append(struct.pack("<H", len(self.chunk_payloads)))
            for payload, cpath, spath in zip(self.chunk_payloads, self.chunk_paths,
                                             self.subtree_paths):
                out.append(struct.pack("<H", len(payload)) + payload)
                out.append(struct.pack("<H", len(cpath)) + b"".join(cpath))
                out.append(struct.pack("<H", len(spath)) + b"".join(spath))
        return b"".join(out)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Proof":
        r = _ProofReader(blob)
        if r.take(4) != PROOF_MAGIC:
            raise SchemaError("not a proof file")
        ver, mode, lam, fr = struct.unpack("<HBII", r.take(11))
        if ver != FORMAT_VERSION or mode not in MODE_NAMES:
            raise SchemaError("unsupported proof header")
        n_x, n_y = struct.unpack("<II", r.take(8))
        cd, wh, troot, seed = r.take(32), r.take(32), r.take(32), r.take(32)
        x = np.frombuffer(r.take(8 * n_x), dtype="<i8").copy()
        y = np.frombuffer(r.take(8 * n_y), dtype="<i8").copy()
        blob_len = struct.unpack("<Q", r.take(8))[0]
        core = r.take(blob_len)
        p = cls(mode, lam, fr, cd, wh, x, y, troot, seed, core)
        if mode == MODE_AUDIT:
            n = struct.unpack("<Q", r.take(8))[0]
            p.full_trace = np.frombuffer(r.take(8 * n), dtype="<i8").copy()
            n = struct.unpack("<Q", r.take(8))[0]
            p.full_weights = np.frombuffer(r.take(8 * n), dtype="<i8").copy()
        else:
            n = struct.unpack("<Q", r.take(8))[0]
            p.trace_values = np.frombuffer(r.take(8 * n), dtype="<i8").copy()
            n = struct.unpack("<Q", r.take(8))[0]
            p.trace_aux = [r.take(32) for _ in range(n)]
            n = struct.unpack("<Q", r.take(8))[0]
            p.weight_values = np.frombuffer(r.take(8 * n), dtype="<i8").copy()
            n = struct.unpack("<Q", r.take(8))[0]
            p.weight_aux = [r.take(32) for _ in range(n)]
            (nt,) = struct.unpack("<H", r.take(2))
            p.table_aux = []
            for _ in range(nt):
                n = struct.unpack("<Q", r.take(8))[0]
                p.table_aux.append([r.take(32) for _ in range(n)])
            (nc,) = struct.unpack("<H", r.take(2))
            p.chunk_payloads, p.chunk_paths, p.subtree_paths = [], [], []
            for _ in range(nc):
                (ln,) = struct.unpack("<H", r.take(2))
                p.chunk_payloads.append(r.take(ln))
                (ln,) = struct.unpack("<H", r.take(2))
                p.chunk_paths.append([r.take(32) for _ in range(ln)])
                (ln,) = struct.unpack("<H", r.take(2))
                p.subtree_paths.append([r.take(32) for _ in range(ln)])
        if not r.done():
            raise SchemaError("trailing bytes in proof")
        return p

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_bytes()).digest()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Proof":
        return cls.from_bytes(Path(path).read_bytes())


class _ProofReader:
    def __init__(self, buf: bytes):
        self.buf, self.off = buf, 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise SchemaError("truncated proof")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def done(self) -> bool:
        return self.off == len(self.buf)


# ---------------------------------------------------------------------------
# Opening planning (shared between prover and verifier)


def _plan_openings(cs: ConstraintSystem, rows: list[int]):
    """Cells/weights/table inputs a set of sampled rows needs opened."""
    trace_cells: set[int] = set()
    weight_idx: set[int] = set()
    lookup_rows: list[Row] = []

    def visit(ref: int):
        if ref < 0:
            return
        space = ref & 3
        if space == TRACE:
            trace_cells.add(ref >> 2)
        elif space == WEIGHT:
            weight_idx.add(ref >> 2)

    for r in rows:
        row = cs.row_at(r)
        if row.kind == K_NOOP:
            continue
        visit(row.a)
        visit(row.b)
        visit(row.c)
        visit(row.out)
        if row.kind == K_LOOKUP:
            lookup_rows.append(row)
    return sorted(trace_cells), sorted(weight_idx), lookup_rows


class _OpenedValues:
    """Field resolution from claimed publics plus opened commitments."""

    def __init__(self, cs: ConstraintSystem, x_units: np.ndarray, y_units: np.ndarray,
                 trace_map: dict[int, int], weight_map: dict[int, int]):
        self.cs = cs
        self.instance = np.concatenate([x_units, y_units]) if len(x_units) + len(y_units) else np.empty(0, np.int64)
        self.trace_map = trace_map
        self.weight_map = weight_map

    def get_signed(self, ref: int) -> int:
        space, idx = ref & 3, ref >> 2
        if space == TRACE:
            return self.trace_map[idx]
        if space == WEIGHT:
            return self.weight_map[idx]
        if space == INSTANCE:
            return int(self.instance[idx])
        return int(self.cs.consts[idx])

    def get_field(self, ref: int) -> int:
        return from_signed(self.get_signed(ref))


def _fold_chunk_subtree(element_hashes: list[bytes], levels: int) -> bytes:
    nodes = list(element_hashes)
    nodes += [merkle.EMPTY_LEAF] * ((1 << levels) - len(nodes))
    for _ in range(levels):
        nodes = [node_hash(nodes[i], nodes[i + 1]) for i in range(0, len(nodes), 2)]
    return nodes[0]


# ---------------------------------------------------------------------------
# Prove


def prove(pk: ProvingKey, w: Witness, mode: str = "spot_check", *,
          lam: int | None = None, fraction: float = DEFAULT_FRACTION,
          binding: bytes = b"", _skip_check: bool = False) -> Proof:
    """Commit the trace and open the transcript-chosen rows.

    Refuses to prove a lying witness (UnsatisfiedWitness) unless the caller
    explicitly disables the guard, which exists only so tests can model a
    malicious prover.
    """
    cs = pk.cs
    if w.circuit_digest != pk.vk.circuit_digest:
        raise WitnessMismatch("witness was generated for a different circuit")
    if w.weight_hash != pk.vk.weight_hash:
        raise WitnessMismatch("witness weight digest does not match the key")
    asg = w.assignment(cs, pk.weights_signed)
    if not _skip_check and not check_satisfied(cs, asg):
        raise UnsatisfiedWitness("trace violates the constraint system")

    lam = pk.vk.lam if lam is None else lam
    fraction_micro = int(round(fraction * 1_000_000))
    mode_code = {"audit": MODE_AUDIT, "spot_check": MODE_SPOT}[mode]

    n_leaves = trace_leaf_count(cs)
    tree = _tree_from_signed(asg.trace, n_leaves)
    seed = _build_transcript(pk.vk.circuit_digest, w.x_tilde, w.y_tilde,
                             pk.vk.weight_hash, tree.root, pk.vk.weight_root,
                             pk.vk.table_roots, mode_code, lam, fraction_micro,
                             binding)

    proof = Proof(mode_code, lam, fraction_micro, pk.vk.circuit_digest,
                  pk.vk.weight_hash, w.x_tilde.copy(), w.y_tilde.copy(),
                  tree.root, seed, cs.core_blob())

    if mode_code == MODE_AUDIT:
        proof.full_trace = asg.trace.copy()
        proof.full_weights = pk.weights_signed.copy()
        return proof

    q = q_rows(lam, fraction_micro / 1_000_000, cs.padded_rows)
    rows = _stream_indices(seed, b"rows", cs.padded_rows, q)
    cells, widx, lookup_rows = _plan_openings(cs, rows)

    proof.trace_values = asg.trace[cells] if cells else np.empty(0, np.int64)
    proof.trace_aux = tree.multiproof(cells) if cells else []
    proof.weight_values = (pk.weights_signed[widx] if widx else np.empty(0, np.int64))
    proof.weight_aux = pk.element_tree.multiproof(widx) if widx else []

    # lookup membership openings, grouped per table
    per_table: dict[int, set[int]] = {}
    for row in lookup_rows:
        table = cs.tables[row.table]
        vin = asg.get_signed(row.a)
        per_table.setdefault(row.table, set()).add(vin - table.lo)
    proof.table_aux = []
    for tid in range(len(cs.tables)):
        idxs = sorted(per_table.get(tid, ()))
        proof.table_aux.append(pk.table_trees[tid].multiproof(idxs) if idxs else [])

    # weight digest cross-binding: open sampled chunks in both trees
    n_chunks = pk.chunk_tree.n_real
    proof.chunk_payloads, proof.chunk_paths, proof.subtree_paths = [], [], []
    if n_chunks:
        chunk_ids = _stream_indices(seed, b"chunks", n_chunks,
                                    min(CHUNK_OPENINGS, n_chunks))
        payloads = weight_chunk_payloads(pk.weights_signed)
        level = min(6, pk.element_tree.height)
        for c in chunk_ids:
            proof.chunk_payloads.append(payloads[c])
            proof.chunk_paths.append(pk.chunk_tree.path(c))
            proof.subtree_paths.append(pk.element_tree.path_from_level(level, c))
    return proof


# ---------------------------------------------------------------------------
# Verify


@dataclass
class VerifyResult:
    ok: bool
    reason: str = "ok"

    def __bool__(self) -> bool:
        return self.ok


def _fail(reason: str) -> VerifyResult:
    return VerifyResult(False, reason)


def verify(vk: VerificationKey, proof: Proof, x_public=None, y_public=None,
           binding: bytes = b"") -> VerifyResult:
    """Total verification: never raises, returns (ok, reason).

    Checks the transcript replay, all openings against the committed roots,
    every opened row's constraint, lookup membership, weight-digest
    consistency, and the public input binding.
    """
    try:
        return _verify_inner(vk, proof, x_public, y_public, binding)
    except SchemaError as e:
        return _fail(f"malformed_proof: {e}")
    except Exception as e:  # noqa: BLE001 - verification must be total
        return _fail(f"verification_error: {type(e).__name__}")


def _verify_inner(vk, proof: Proof, x_public, y_public, binding) -> VerifyResult:
    if proof.circuit_digest != vk.circuit_digest:
        return _fail("circuit_digest_mismatch")
    if proof.weight_hash != vk.weight_hash:
        return _fail("weight_hash_mismatch")
    if hashlib.sha256(proof.blob).digest() != vk.circuit_digest:
        return _fail("layout_blob_mismatch")
    if len(proof.x_units) != vk.n_x or len(proof.y_units) != vk.n_y:
        return _fail("public_input_arity")
    if x_public is not None and not np.array_equal(
            np.asarray(x_public, np.int64), proof.x_units):
        return _fail("public_input_mismatch")
    if y_public is not None and not np.array_equal(
            np.asarray(y_public, np.int64), proof.y_units):
        return _fail("public_output_mismatch")

    cs = system_from_blob(proof.blob)
    if cs.n_con != vk.n_con or cs.n_cells != vk.n_cells:
        return _fail("layout_header_mismatch")
    if len(cs.tables) != len(vk.table_roots):
        return _fail("table_count_mismatch")

    seed = _build_transcript(vk.circuit_digest, proof.x_units, proof.y_units,
                             vk.weight_hash, proof.trace_root, vk.weight_root,
                             vk.table_roots, proof.mode, proof.lam,
                             proof.fraction_micro, binding)
    if seed != proof.seed:
        return _fail("transcript_mismatch")

    if proof.mode == MODE_AUDIT:
        return _verify_audit(vk, cs, proof)
    return _verify_spot(vk, cs, proof, seed)


def _verify_audit(vk, cs: ConstraintSystem, proof: Proof) -> VerifyResult:
    if len(proof.full_trace) != cs.n_cells:
        return _fail("trace_length_mismatch")
    if len(proof.full_weights) != vk.n_weights:
        return _fail("weight_length_mismatch")
    tree = _tree_from_signed(proof.full_trace, trace_leaf_count(cs))
    if tree.root != proof.trace_root:
        return _fail("trace_root_mismatch")
    el_tree = _tree_from_signed(proof.full_weights,
                                padded_row_count(max(vk.n_weights, 1)))
    if vk.n_weights and el_tree.root != vk.weight_root:
        return _fail("weight_root_mismatch")
    chunks = weight_chunk_payloads(proof.full_weights)
    chunk_root = merkle.merkle_root(chunks)
    if chunk_root != vk.weight_hash:
        return _fail("weight_digest_mismatch")

    from .circuit import Assignment
    asg = Assignment(cs.n_cells, np.concatenate([proof.x_units, proof.y_units]),
                     proof.full_weights, cs.consts)
    asg.trace = proof.full_trace
    for r, row in enumerate(cs.rows()):
        if not row_holds(cs, row, asg.get_field):
            return _fail(f"constraint_violated_at_row_{r}")
    return VerifyResult(True)


def _verify_spot(vk, cs: ConstraintSystem, proof: Proof, seed: bytes) -> VerifyResult:
    q = q_rows(proof.lam, proof.fraction_micro / 1_000_000, cs.padded_rows)
    rows = _stream_indices(seed, b"rows", cs.padded_rows, q)
    cells, widx, lookup_rows = _plan_openings(cs, rows)

    if len(proof.trace_values) != len(cells):
        return _fail("opening_count_mismatch")
    if len(proof.weight_values) != len(widx):
        return _fail("weight_opening_count_mismatch")

    # authenticate trace openings
    n_leaves = trace_leaf_count(cs)
    if cells:
        hashes = [leaf_hash(struct.pack("<Q", from_signed(int(v))))
                  for v in proof.trace_values]
        root = root_from_multiproof(n_leaves, cells, hashes, iter(proof.trace_aux))
        if root != proof.trace_root:
            return _fail("opening_authentication_failed")
    elif proof.trace_aux:
        return _fail("unexpected_trace_aux")

    # authenticate weight openings
    if widx:
        w_leaves = padded_row_count(max(vk.n_weights, 1))
        hashes = [leaf_hash(struct.pack("<Q", from_signed(int(v))))
                  for v in proof.weight_values]
        root = root_from_multiproof(w_leaves, widx, hashes, iter(proof.weight_aux))
        if root != vk.weight_root:
            return _fail("weight_opening_authentication_failed")
    elif proof.weight_aux:
        return _fail("unexpected_weight_aux")

    opened = _OpenedValues(cs, proof.x_units, proof.y_units,
                           dict(zip(cells, proof.trace_values.tolist())),
                           dict(zip(widx, proof.weight_values.tolist())))

    # arithmetic rows
    for r in rows:
        row = cs.row_at(r)
        if row.kind in (K_NOOP, K_LOOKUP):
            continue
        try:
            if not row_holds(cs, row, opened.get_field):
                return _fail(f"constraint_violated_at_row_{r}")
        except KeyError:
            return _fail("missing_opening")

    # lookup rows: membership against the committed tables
    per_table: dict[int, dict[int, bytes]] = {}
    for row in lookup_rows:
        table = cs.tables[row.table]
        try:
            vin = opened.get_signed(row.a)
            vout = opened.get_signed(row.out)
        except KeyError:
            return _fail("missing_opening")
        if not table.lo <= vin <= table.hi:
            return _fail("lookup_input_outside_domain")
        payload = struct.pack("<QQ", from_signed(vin), from_signed(vout))
        entry = per_table.setdefault(row.table, {})
        idx = vin - table.lo
        if idx in entry and entry[idx] != payload:
            return _fail("conflicting_lookup_claims")
        entry[idx] = payload
    if proof.table_aux is None or len(proof.table_aux) != len(cs.tables):
        return _fail("table_aux_arity")
    for tid, table in enumerate(cs.tables):
        claims = per_table.get(tid, {})
        idxs = sorted(claims)
        aux = proof.table_aux[tid]
        if not idxs:
            if aux:
                return _fail("unexpected_table_aux")
            continue
        size = merkle._padded_size(table.size)
        hashes = [leaf_hash(claims[i]) for i in idxs]
        root = root_from_multiproof(size, idxs, hashes, iter(aux))
        if root != vk.table_roots[tid]:
            return _fail("lookup_membership_failed")

    # weight digest cross-binding
    n_chunks = -(-vk.n_weights // WEIGHT_CHUNK) if vk.n_weights else 0
    if n_chunks:
        chunk_ids = _stream_indices(seed, b"chunks", n_chunks,
                                    min(CHUNK_OPENINGS, n_chunks))
        if len(proof.chunk_payloads) != len(chunk_ids):
            return _fail("chunk_opening_count_mismatch")
        w_leaves = padded_row_count(max(vk.n_weights, 1))
        height = (w_leaves - 1).bit_length() if w_leaves > 1 else 0
        level = min(6, height)
        chunk_leaves = merkle._padded_size(n_chunks)
        for c, payload, cpath, spath in zip(chunk_ids, proof.chunk_payloads,
                                            proof.chunk_paths, proof.subtree_paths):
            expected_len = min(WEIGHT_CHUNK, vk.n_weights - c * WEIGHT_CHUNK) * 8
            if len(payload) != expected_len:
                return _fail("chunk_payload_length")
            if not merkle.verify_path(vk.weight_hash, chunk_leaves, c,
                                      leaf_hash(payload), cpath):
                return _fail("chunk_digest_path_failed")
            elem_hashes = [leaf_hash(payload[i : i + 8])
                           for i in range(0, len(payload), 8)]
            node = _fold_chunk_subtree(elem_hashes, level)
            if not merkle.verify_path_from_level(vk.weight_root, w_leaves, level,
                                                 c, node, spath):
                return _fail("weight_digest_cross_binding_failed")
    elif proof.chunk_payloads:
        return _fail("unexpected_chunk_openings")

    return VerifyResult(True)
