"""Constraint-system lowering built from four reusable argument families.

A compiled circuit is a list of *regions*, each emitting rows of one
constraint shape: cumulative sum/product/dot-product steps, elementwise
add/sub/mul equations, lookup memberships against committed tables, and
booleanity checks.  Every row references cells in four spaces:

    TRACE     witness cells committed per proof
    WEIGHT    private model weights, committed once at setup
    INSTANCE  public values (quantized input and output)
    CONST     circuit constants

Cells hold centered (signed) grid integers; the field representative of a
cell is ``from_signed(value)``.  One row is one constraint: that is the unit
``n_con`` counts and the cost model consumes.
"""

from __future__ import annotations

import bisect
import hashlib
import json
import struct
import zlib
from dataclasses import dataclass
from typing import Callable, Iterator, NamedTuple

import numpy as np

from . import graph as graphmod
from .calibration import CalibrationReport, circuit_output_refs, graph_digest
from .errors import (
    DomainError,
    LengthMismatch,
    SchemaError,
    UnsupportedOpError,
)
from .field import HALF_RANGE, MODULUS, from_signed, to_signed
from .graph import Graph, fused_bias_pairs, gather_structure, lower_to_einsum

CIRCUIT_FORMAT_VERSION = 1

# Reference spaces (low two bits of a packed ref).
TRACE, WEIGHT, INSTANCE, CONST = 0, 1, 2, 3
NULL = -1

# Row kinds.
K_NOOP, K_DOT, K_SUM, K_PROD, K_ADD, K_SUB, K_MUL, K_LOOKUP, K_BOOL = range(9)

KIND_NAMES = {
    K_NOOP: "noop", K_DOT: "dot_step", K_SUM: "sum_step", K_PROD: "product_step",
    K_ADD: "elementwise_add", K_SUB: "elementwise_sub", K_MUL: "elementwise_mul",
    K_LOOKUP: "lookup", K_BOOL: "booleanity",
}

_INT_GUARD = 1 << 62  # witness generation works in int64; stay far from the edge


def mk_ref(space: int, idx: int) -> int:
    return (int(idx) << 2) | space


def ref_space(ref: int) -> int:
    return ref & 3


def ref_index(ref: int) -> int:
    return ref >> 2


def padded_row_count(n_con: int) -> int:
    """Least power of two >= n_con (and 1 for the empty circuit)."""
    if n_con <= 1:
        return 1
    return 1 << (n_con - 1).bit_length()


class Row(NamedTuple):
    """One constraint.  Semantics by kind:

    dot_step   a*b + c = out       sum_step  a + c = out
    prod_step  a*c = out           add/sub   a (+|-) b + k = out
    mul        a*b + k = out       lookup    table[a] = out
    bool       a*(a-1) = 0         noop      always satisfied
    """

    kind: int
    a: int = NULL
    b: int = NULL
    c: int = NULL
    out: int = NULL
    k: int = 0
    table: int = NULL


# ---------------------------------------------------------------------------
# Lookup tables


_TABLE_KINDS = ("relu", "sigmoid", "exp", "recip", "rescale", "identity",
                "iszero", "abs")


@dataclass
class LookupTable:
    """Total function over a contiguous signed-integer input domain.

    Entries are derived from the table's metadata, so any party can rebuild
    the committed key-value columns; membership of a (in, out) pair is what
    proofs authenticate.
    """

    table_id: int
    kind: str
    lo: int
    hi: int
    in_scale: int
    out_scale: int
    shift: int = 0
    _entries: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.hi - self.lo + 1

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Functional application with domain checking."""
        x = np.asarray(x, dtype=np.int64)
        if x.size and (x.min() < self.lo or x.max() > self.hi):
            bad = x[(x < self.lo) | (x > self.hi)][0]
            raise DomainError(
                f"table {self.table_id} ({self.kind}): input {int(bad)} outside "
                f"[{self.lo}, {self.hi}] - recalibrate"
            )
        if self.kind == "relu":
            return np.maximum(x, 0)
        if self.kind == "rescale":
            return np.floor_divide(x, 1 << self.shift)
        if self.kind == "identity":
            return x.copy()
        if self.kind == "iszero":
            return (x == 0).astype(np.int64)
        if self.kind == "abs":
            return np.abs(x)
        real = x.astype(np.float64) / float(1 << self.in_scale)
        if self.kind == "sigmoid":
            vals = 1.0 / (1.0 + np.exp(-real))
        elif self.kind == "exp":
            vals = np.exp(real)
        elif self.kind == "recip":
            if self.lo <= 0 <= self.hi:
                raise DomainError("reciprocal table domain must exclude zero")
            vals = 1.0 / real
        else:
            raise UnsupportedOpError(self.kind)
        scaled = np.abs(vals) * float(1 << self.out_scale)
        if np.any(scaled >= float(HALF_RANGE)):
            raise OverflowError("table output exceeds the field half-range")
        units = np.floor(scaled + 0.5)
        return np.where(vals >= 0, units, -units).astype(np.int64)

    @property
    def entries(self) -> np.ndarray:
        if self._entries is None:
            self._entries = self.apply(np.arange(self.lo, self.hi + 1, dtype=np.int64))
        return self._entries

    def lookup(self, v: int) -> int:
        if not self.lo <= v <= self.hi:
            raise DomainError(f"table {self.table_id}: {v} outside domain")
        return int(self.entries[v - self.lo])

    def leaf_payloads(self) -> Iterator[bytes]:
        ins = np.arange(self.lo, self.hi + 1, dtype=np.int64)
        for i, o in zip(ins.tolist(), self.entries.tolist()):
            yield struct.pack("<QQ", from_signed(i), from_signed(o))

    def meta(self) -> dict:
        return {"kind": self.kind, "lo": self.lo, "hi": self.hi,
                "in_scale": self.in_scale, "out_scale": self.out_scale,
                "shift": self.shift}


# ---------------------------------------------------------------------------
# Assignments


class Assignment:
    """Full column values for a circuit: trace, instance, weights, constants."""

    def __init__(self, n_cells: int, instance: np.ndarray, weights: np.ndarray,
                 consts: np.ndarray):
        self.trace = np.zeros(n_cells, dtype=np.int64)
        self.instance = np.asarray(instance, dtype=np.int64)
        self.weights = np.asarray(weights, dtype=np.int64)
        self.consts = np.asarray(consts, dtype=np.int64)

    def _arrays(self):
        return {TRACE: self.trace, WEIGHT: self.weights,
                INSTANCE: self.instance, CONST: self.consts}

    def gather(self, refs: np.ndarray) -> np.ndarray:
        refs = np.asarray(refs, dtype=np.int64)
        out = np.empty(refs.shape, dtype=np.int64)
        spaces = refs & 3
        idxs = refs >> 2
        for space, arr in self._arrays().items():
            mask = spaces == space
            if mask.any():
                out[mask] = arr[idxs[mask]]
        return out

    def scatter(self, refs: np.ndarray, values: np.ndarray) -> None:
        refs = np.asarray(refs, dtype=np.int64).reshape(-1)
        values = np.asarray(values, dtype=np.int64).reshape(-1)
        spaces = refs & 3
        idxs = refs >> 2
        for space in (TRACE, INSTANCE):
            mask = spaces == space
            if mask.any():
                self._arrays()[space][idxs[mask]] = values[mask]
        if np.any(spaces == WEIGHT):
            raise ValueError("cannot write to weight cells")
        # CONST writes are drops: the value is fixed by the circuit.

    def get_signed(self, ref: int) -> int:
        return int(self._arrays()[ref & 3][ref >> 2])

    def get_field(self, ref: int) -> int:
        return from_signed(self.get_signed(ref))


# ---------------------------------------------------------------------------
# Regions


@dataclass
class Region:
    row_start: int = 0

    @property
    def n_rows(self) -> int:
        raise NotImplementedError

    def rows(self) -> Iterator[Row]:
        for i in range(self.n_rows):
            yield self.row_at(i)

    def row_at(self, i: int) -> Row:
        raise NotImplementedError

    def fill(self, asg: Assignment, cs: "ConstraintSystem", external: dict) -> None:
        pass


def _check_magnitude(arr: np.ndarray) -> None:
    if arr.size and int(np.max(np.abs(arr))) >= _INT_GUARD:
        raise DomainError("intermediate value exceeds the integer guard range")


@dataclass
class DotRegion(Region):
    """Per output element: a cumulative dot product x.y seeded at m0."""

    x_refs: np.ndarray = None  # (n_out, k)
    y_refs: np.ndarray = None
    m0_refs: np.ndarray = None  # (n_out,)
    out_refs: np.ndarray = None  # (n_out,) final accumulator targets
    acc_base: int = 0           # n_out * (k-1) intermediate cells

    @property
    def n_out(self) -> int:
        return self.x_refs.shape[0]

    @property
    def k_len(self) -> int:
        return self.x_refs.shape[1]

    @property
    def n_rows(self) -> int:
        return self.n_out * self.k_len

    def _acc_ref(self, o: int, j: int) -> int:
        # accumulator after step j (0-based); the final one is out_refs[o]
        if j == self.k_len - 1:
            return int(self.out_refs[o])
        return mk_ref(TRACE, self.acc_base + o * (self.k_len - 1) + j)

    def row_at(self, i: int) -> Row:
        o, j = divmod(i, self.k_len)
        prev = int(self.m0_refs[o]) if j == 0 else self._acc_ref(o, j - 1)
        return Row(K_DOT, a=int(self.x_refs[o, j]), b=int(self.y_refs[o, j]),
                   c=prev, out=self._acc_ref(o, j))

    def fill(self, asg, cs, external) -> None:
        xa = asg.gather(self.x_refs)
        ya = asg.gather(self.y_refs)
        prods = xa * ya
        _check_magnitude(prods)
        acc = np.cumsum(prods, axis=1) + asg.gather(self.m0_refs)[:, None]
        _check_magnitude(acc)
        if self.k_len > 1:
            inter = np.arange(self.n_out * (self.k_len - 1)) + self.acc_base
            asg.trace[inter] = acc[:, :-1].reshape(-1)
        asg.scatter(self.out_refs, acc[:, -1])


@dataclass
class CumRegion(Region):
    """Cumulative sum or product over one vector, seeded at the identity."""

    op: str = "sum"  # or "prod"
    x_refs: np.ndarray = None  # (n,)
    m0_ref: int = 0
    out_ref: int = 0
    acc_base: int = 0  # n-1 intermediate cells

    @property
    def n(self) -> int:
        return len(self.x_refs)

    @property
    def n_rows(self) -> int:
        return self.n

    def _acc_ref(self, j: int) -> int:
        if j == self.n - 1:
            return self.out_ref
        return mk_ref(TRACE, self.acc_base + j)

    def row_at(self, i: int) -> Row:
        prev = self.m0_ref if i == 0 else self._acc_ref(i - 1)
        kind = K_SUM if self.op == "sum" else K_PROD
        return Row(kind, a=int(self.x_refs[i]), c=prev, out=self._acc_ref(i))

    def fill(self, asg, cs, external) -> None:
        x = asg.gather(self.x_refs)
        if self.op == "sum":
            acc = np.cumsum(x) + asg.get_signed(self.m0_ref)
            _check_magnitude(acc)
        else:
            vals = []
            m = asg.get_field(self.m0_ref)
            for v in x.tolist():
                m = (m * from_signed(v)) % MODULUS
                vals.append(to_signed(m))
            acc = np.asarray(vals, dtype=np.int64)
        if self.n > 1:
            asg.trace[self.acc_base : self.acc_base + self.n - 1] = acc[:-1]
        asg.scatter(np.asarray([self.out_ref]), acc[-1:])


@dataclass
class ElemRegion(Region):
    """Elementwise a (op) b + k = out over aligned vectors."""

    op: str = "add"  # add / sub / mul
    a_refs: np.ndarray = None
    b_refs: np.ndarray = None
    out_refs: np.ndarray = None
    k: int = 0

    @property
    def n_rows(self) -> int:
        return len(self.a_refs)

    def row_at(self, i: int) -> Row:
        kind = {"add": K_ADD, "sub": K_SUB, "mul": K_MUL}[self.op]
        return Row(kind, a=int(self.a_refs[i]), b=int(self.b_refs[i]),
                   out=int(self.out_refs[i]), k=self.k)

    def fill(self, asg, cs, external) -> None:
        a = asg.gather(self.a_refs)
        b = asg.gather(self.b_refs)
        if self.op == "add":
            out = a + b + self.k
        elif self.op == "sub":
            out = a - b + self.k
        else:
            out = a * b + self.k
        _check_magnitude(out)
        asg.scatter(self.out_refs, out)


@dataclass
class LookupRegion(Region):
    """Membership rows (in, out) against one committed table."""

    table_id: int = 0
    in_refs: np.ndarray = None
    out_refs: np.ndarray = None

    @property
    def n_rows(self) -> int:
        return len(self.in_refs)

    def row_at(self, i: int) -> Row:
        return Row(K_LOOKUP, a=int(self.in_refs[i]), out=int(self.out_refs[i]),
                   table=self.table_id)

    def fill(self, asg, cs, external) -> None:
        table = cs.tables[self.table_id]
        asg.scatter(self.out_refs, table.apply(asg.gather(self.in_refs)))


@dataclass
class BoolRegion(Region):
    """y * (y - 1) = 0 for each referenced cell."""

    refs: np.ndarray = None

    @property
    def n_rows(self) -> int:
        return len(self.refs)

    def row_at(self, i: int) -> Row:
        return Row(K_BOOL, a=int(self.refs[i]))


@dataclass
class FreeRegion(Region):
    """Zero-row region that assigns prover-chosen cells during generation.

    kind='max'/'min' computes the claimed extremum of its operand refs;
    kind='external' reads values from the caller (keyed by label).
    """

    kind: str = "external"
    label: str = ""
    x_refs: np.ndarray = None
    out_refs: np.ndarray = None

    @property
    def n_rows(self) -> int:
        return 0

    def fill(self, asg, cs, external) -> None:
        if self.kind == "max":
            asg.scatter(self.out_refs, np.asarray([asg.gather(self.x_refs).max()]))
        elif self.kind == "min":
            asg.scatter(self.out_refs, np.asarray([asg.gather(self.x_refs).min()]))
        else:
            if self.label not in (external or {}):
                raise KeyError(f"external witness values missing for {self.label!r}")
            asg.scatter(self.out_refs, np.asarray(external[self.label], dtype=np.int64))


_REGION_TAGS = {DotRegion: 1, CumRegion: 2, ElemRegion: 3, LookupRegion: 4,
                BoolRegion: 5, FreeRegion: 6}
_TAG_REGIONS = {v: k for k, v in _REGION_TAGS.items()}


# ---------------------------------------------------------------------------
# Constraint system


@dataclass
class Argument:
    """Reporting view of one region: its family, row slice, and selector id."""

    kind: str
    row_start: int
    row_count: int
    selector: int


@dataclass
class ConstraintSystem:
    scale: int
    regions: list
    tables: list[LookupTable]
    consts: np.ndarray
    n_cells: int
    instance_meta: dict       # input/output names, shapes, postprocess
    weight_layout: list       # [(name, size, scale)] sorted by name
    settings_json: str = ""
    source_digest: str = ""

    _blob: bytes | None = None

    @property
    def n_con(self) -> int:
        return sum(r.n_rows for r in self.regions)

    @property
    def padded_rows(self) -> int:
        return padded_row_count(self.n_con)

    @property
    def n_instance(self) -> int:
        return self.instance_meta["n_x"] + self.instance_meta["n_y"]

    @property
    def n_weights(self) -> int:
        return sum(size for _, size, _ in self.weight_layout)

    @property
    def arguments(self) -> list[Argument]:
        out = []
        for sel, r in enumerate(self.regions):
            if r.n_rows == 0:
                continue
            if isinstance(r, DotRegion):
                kind = "cumulative_dot_product"
            elif isinstance(r, CumRegion):
                kind = "cumulative_sum" if r.op == "sum" else "cumulative_product"
            elif isinstance(r, ElemRegion):
                kind = f"elementwise_{r.op}"
            elif isinstance(r, LookupRegion):
                kind = f"lookup[{r.table_id}]"
            else:
                kind = "booleanity"
            out.append(Argument(kind, r.row_start, r.n_rows, sel))
        return out

    def rows(self) -> Iterator[Row]:
        for region in self.regions:
            yield from region.rows()

    def row_at(self, r: int) -> Row:
        if r >= self.n_con:
            return Row(K_NOOP)
        i = bisect.bisect_right(self._starts, r) - 1
        region = self.regions_with_rows[i]
        return region.row_at(r - region.row_start)

    def finalize_rows(self) -> None:
        start = 0
        for region in self.regions:
            region.row_start = start
            start += region.n_rows
        self.regions_with_rows = [r for r in self.regions if r.n_rows]
        self._starts = [r.row_start for r in self.regions_with_rows]

    # -- serialization ------------------------------------------------------

    def core_blob(self) -> bytes:
        if self._blob is None:
            self._blob = _serialize_system(self)
        return self._blob

    def digest(self) -> bytes:
        return hashlib.sha256(self.core_blob()).digest()

    def table_by_meta(self, kind: str, in_scale: int, out_scale: int, shift: int):
        for t in self.tables:
            if (t.kind, t.in_scale, t.out_scale, t.shift) == (kind, in_scale, out_scale, shift):
                return t
        return None


def _pack_array(arr: np.ndarray) -> bytes:
    data = np.ascontiguousarray(arr, dtype=np.int64).tobytes()
    return struct.pack("<I", len(data)) + data


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise SchemaError("truncated circuit blob")
        out = self.buf[self.off : self.off + n]
        self.off += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def i64(self) -> int:
        return struct.unpack("<q", self.take(8))[0]

    def array(self, shape=None) -> np.ndarray:
        n = self.u32()
        arr = np.frombuffer(self.take(n), dtype=np.int64).copy()
        return arr.reshape(shape) if shape is not None else arr

    def done(self) -> bool:
        return self.off == len(self.buf)


def _serialize_region(region) -> bytes:
    tag = _REGION_TAGS[type(region)]
    out = [struct.pack("<B", tag)]
    if isinstance(region, DotRegion):
        out.append(struct.pack("<IIq", region.n_out, region.k_len, region.acc_base))
        out.append(_pack_array(region.x_refs))
        out.append(_pack_array(region.y_refs))
        out.append(_pack_array(region.m0_refs))
        out.append(_pack_array(region.out_refs))
    elif isinstance(region, CumRegion):
        out.append(struct.pack("<BIqq", region.op == "prod", region.n,
                               region.m0_ref, region.out_ref))
        out.append(struct.pack("<q", region.acc_base))
        out.append(_pack_array(region.x_refs))
    elif isinstance(region, ElemRegion):
        opc = {"add": 0, "sub": 1, "mul": 2}[region.op]
        out.append(struct.pack("<Bq", opc, region.k))
        out.append(_pack_array(region.a_refs))
        out.append(_pack_array(region.b_refs))
        out.append(_pack_array(region.out_refs))
    elif isinstance(region, LookupRegion):
        out.append(struct.pack("<I", region.table_id))
        out.append(_pack_array(region.in_refs))
        out.append(_pack_array(region.out_refs))
    elif isinstance(region, BoolRegion):
        out.append(_pack_array(region.refs))
    elif isinstance(region, FreeRegion):
        kb = region.kind.encode()
        lb = region.label.encode()
        out.append(struct.pack("<BB", len(kb), len(lb)) + kb + lb)
        out.append(_pack_array(region.x_refs if region.x_refs is not None
                               else np.empty(0, np.int64)))
        out.append(_pack_array(region.out_refs))
    return b"".join(out)


def _deserialize_region(r: _Reader):
    tag = r.u8()
    cls = _TAG_REGIONS.get(tag)
    if cls is DotRegion:
        n_out, k_len, acc_base = struct.unpack("<IIq", r.take(16))
        return DotRegion(x_refs=r.array((n_out, k_len)), y_refs=r.array((n_out, k_len)),
                         m0_refs=r.array(), out_refs=r.array(), acc_base=acc_base)
    if cls is CumRegion:
        is_prod, n, m0, outr = struct.unpack("<BIqq", r.take(21))
        acc_base = struct.unpack("<q", r.take(8))[0]
        return CumRegion(op="prod" if is_prod else "sum", x_refs=r.array(),
                         m0_ref=m0, out_ref=outr, acc_base=acc_base)
    if cls is ElemRegion:
        opc, k = struct.unpack("<Bq", r.take(9))
        return ElemRegion(op=["add", "sub", "mul"][opc], k=k, a_refs=r.array(),
                          b_refs=r.array(), out_refs=r.array())
    if cls is LookupRegion:
        tid = r.u32()
        return LookupRegion(table_id=tid, in_refs=r.array(), out_refs=r.array())
    if cls is BoolRegion:
        return BoolRegion(refs=r.array())
    if cls is FreeRegion:
        nk, nl = struct.unpack("<BB", r.take(2))
        kind = r.take(nk).decode()
        label = r.take(nl).decode()
        x = r.array()
        return FreeRegion(kind=kind, label=label,
                          x_refs=x if x.size else None, out_refs=r.array())
    raise SchemaError(f"unknown region tag {tag}")


def _serialize_system(cs: ConstraintSystem) -> bytes:
    head = {
        "version": CIRCUIT_FORMAT_VERSION,
        "scale": cs.scale,
        "n_cells": cs.n_cells,
        "instance": cs.instance_meta,
        "weights": cs.weight_layout,
        "tables": [t.meta() for t in cs.tables],
        "source_digest": cs.source_digest,
        "settings_digest": hashlib.sha256(cs.settings_json.encode()).hexdigest(),
    }
    head_bytes = json.dumps(head, sort_keys=True).encode()
    regions = zlib.compress(b"".join(_serialize_region(r) for r in cs.regions), 6)
    consts = np.ascontiguousarray(cs.consts, dtype=np.int64).tobytes()
    return b"".join([
        struct.pack("<I", len(head_bytes)), head_bytes,
        struct.pack("<I", len(consts)), consts,
        struct.pack("<I", len(regions)), regions,
    ])


CIRCUIT_FILE_MAGIC = b"ZKCF"


def save_circuit(cs: ConstraintSystem, path) -> None:
    """Versioned circuit file: embedded calibration settings plus the layout."""
    from pathlib import Path
    settings = cs.settings_json.encode()
    blob = cs.core_blob()
    Path(path).write_bytes(
        CIRCUIT_FILE_MAGIC + struct.pack("<H", CIRCUIT_FORMAT_VERSION)
        + struct.pack("<I", len(settings)) + settings
        + struct.pack("<Q", len(blob)) + blob
    )


def load_circuit(path) -> ConstraintSystem:
    from pathlib import Path
    raw = Path(path).read_bytes()
    if raw[:4] != CIRCUIT_FILE_MAGIC:
        raise SchemaError("not a circuit file")
    (ver,) = struct.unpack("<H", raw[4:6])
    if ver != CIRCUIT_FORMAT_VERSION:
        raise SchemaError(f"unsupported circuit file version {ver}")
    off = 6
    (ns,) = struct.unpack("<I", raw[off : off + 4])
    off += 4
    settings = raw[off : off + ns].decode()
    off += ns
    (nb,) = struct.unpack("<Q", raw[off : off + 8])
    off += 8
    blob = raw[off : off + nb]
    if off + nb != len(raw):
        raise SchemaError("circuit file length mismatch")
    return system_from_blob(blob, settings_json=settings)


def system_from_blob(blob: bytes, settings_json: str = "") -> ConstraintSystem:
    r = _Reader(blob)
    head = json.loads(r.take(r.u32()).decode())
    if head["version"] != CIRCUIT_FORMAT_VERSION:
        raise SchemaError(f"unsupported circuit version {head['version']}")
    consts = np.frombuffer(r.take(r.u32()), dtype=np.int64).copy()
    regions_raw = zlib.decompress(r.take(r.u32()))
    if not r.done():
        raise SchemaError("trailing bytes in circuit blob")
    rr = _Reader(regions_raw)
    regions = []
    while not rr.done():
        regions.append(_deserialize_region(rr))
    tables = [LookupTable(table_id=i, **meta) for i, meta in enumerate(head["tables"])]
    cs = ConstraintSystem(
        scale=head["scale"], regions=regions, tables=tables, consts=consts,
        n_cells=head["n_cells"], instance_meta=head["instance"],
        weight_layout=[tuple(w) for w in head["weights"]],
        settings_json=settings_json, source_digest=head["source_digest"],
    )
    cs.finalize_rows()
    return cs


# ---------------------------------------------------------------------------
# Builder


class CircuitBuilder:
    """Incrementally allocates cells, constants, tables, and regions."""

    def __init__(self, scale: int):
        self.scale = scale
        self.n_cells = 0
        self.consts: list[int] = [0, 1]
        self._const_idx = {0: 0, 1: 1}
        self.regions: list = []
        self.tables: list[LookupTable] = []
        self._table_idx: dict[tuple, int] = {}

    # -- cells / consts -----------------------------------------------------

    def alloc(self, n: int) -> np.ndarray:
        refs = (np.arange(self.n_cells, self.n_cells + n, dtype=np.int64) << 2) | TRACE
        self.n_cells += n
        return refs

    def const(self, value: int) -> int:
        value = int(value)
        if value not in self._const_idx:
            self._const_idx[value] = len(self.consts)
            self.consts.append(value)
        return mk_ref(CONST, self._const_idx[value])

    def table(self, kind: str, in_scale: int, out_scale: int, lo: int, hi: int,
              shift: int = 0) -> int:
        key = (kind, in_scale, out_scale, shift)
        if key in self._table_idx:
            t = self.tables[self._table_idx[key]]
            t.lo, t.hi = min(t.lo, lo), max(t.hi, hi)
            t._entries = None
            return t.table_id
        tid = len(self.tables)
        self.tables.append(LookupTable(tid, kind, lo, hi, in_scale, out_scale, shift))
        self._table_idx[key] = tid
        return tid

    # -- argument families --------------------------------------------------

    def dot(self, x_refs, y_refs, m0_refs=None, out_refs=None) -> np.ndarray:
        x_refs = np.asarray(x_refs, dtype=np.int64)
        y_refs = np.asarray(y_refs, dtype=np.int64)
        if x_refs.shape != y_refs.shape:
            raise LengthMismatch(f"dot operands {x_refs.shape} vs {y_refs.shape}")
        if x_refs.ndim == 1:
            x_refs, y_refs = x_refs[None, :], y_refs[None, :]
        n_out, k = x_refs.shape
        if k < 1:
            raise LengthMismatch("dot product needs length >= 1")
        if m0_refs is None:
            m0_refs = np.full(n_out, self.const(0), dtype=np.int64)
        m0_refs = np.asarray(m0_refs, dtype=np.int64)
        acc_base = self.n_cells
        self.n_cells += n_out * (k - 1)
        if out_refs is None:
            out_refs = self.alloc(n_out)
        out_refs = np.asarray(out_refs, dtype=np.int64)
        self.regions.append(DotRegion(x_refs=x_refs, y_refs=y_refs, m0_refs=m0_refs,
                                      out_refs=out_refs, acc_base=acc_base))
        return out_refs

    def cumulative(self, op: str, x_refs, m0_ref=None, out_ref=None) -> int:
        x_refs = np.asarray(x_refs, dtype=np.int64)
        if x_refs.size < 1:
            raise LengthMismatch("cumulative argument needs length >= 1")
        if m0_ref is None:
            m0_ref = self.const(0 if op == "sum" else 1)
        acc_base = self.n_cells
        self.n_cells += len(x_refs) - 1
        if out_ref is None:
            out_ref = int(self.alloc(1)[0])
        self.regions.append(CumRegion(op=op, x_refs=x_refs, m0_ref=int(m0_ref),
                                      out_ref=int(out_ref), acc_base=acc_base))
        return out_ref

    def elementwise(self, op: str, a_refs, b_refs, k: int = 0, out_refs=None) -> np.ndarray:
        a_refs = np.asarray(a_refs, dtype=np.int64).reshape(-1)
        b_refs = np.asarray(b_refs, dtype=np.int64).reshape(-1)
        if a_refs.shape != b_refs.shape:
            raise LengthMismatch(f"elementwise operands {a_refs.shape} vs {b_refs.shape}")
        if out_refs is None:
            out_refs = self.alloc(len(a_refs))
        self.regions.append(ElemRegion(op=op, a_refs=a_refs, b_refs=b_refs,
                                       out_refs=np.asarray(out_refs, np.int64), k=int(k)))
        return np.asarray(out_refs, np.int64)

    def lookup(self, table_id: int, in_refs, out_refs=None) -> np.ndarray:
        in_refs = np.asarray(in_refs, dtype=np.int64).reshape(-1)
        if out_refs is None:
            out_refs = self.alloc(len(in_refs))
        self.regions.append(LookupRegion(table_id=table_id, in_refs=in_refs,
                                         out_refs=np.asarray(out_refs, np.int64)))
        return np.asarray(out_refs, np.int64)

    def booleanity(self, refs) -> None:
        self.regions.append(BoolRegion(refs=np.asarray(refs, dtype=np.int64).reshape(-1)))

    def free(self, kind: str, n: int, label: str = "", x_refs=None, out_refs=None) -> np.ndarray:
        if out_refs is None:
            out_refs = self.alloc(n)
        self.regions.append(FreeRegion(
            kind=kind, label=label,
            x_refs=None if x_refs is None else np.asarray(x_refs, np.int64).reshape(-1),
            out_refs=np.asarray(out_refs, np.int64)))
        return np.asarray(out_refs, np.int64)

    def extremum_argument(self, which: str, x_refs, bound_units: int,
                          out_ref=None, relu_scale: int | None = None) -> int:
        """Max/min over a vector via shift, clip, booleanity, and membership.

        Emits 3N+2 constraint rows plus one length-N cumulative-sum
        accumulator.  The claimed extremum is a prover-assigned cell; the
        construction is satisfiable exactly when the claim is correct.
        """
        x_refs = np.asarray(x_refs, dtype=np.int64).reshape(-1)
        n = len(x_refs)
        scale = self.scale if relu_scale is None else relu_scale
        b = int(bound_units)
        tid = self.table("relu", scale, scale,
                         lo=min(-2 * b - 2, -n - 2), hi=max(2 * b + 2, 2))
        slot = None if out_ref is None else np.asarray([out_ref], np.int64)
        m_refs = self.free(which, 1, x_refs=x_refs, out_refs=slot)
        m_ref = int(m_refs[0])
        m_col = np.full(n, m_ref, dtype=np.int64)
        if which == "max":
            # w_i = x_i - (m - 1); at most one unit above zero
            w = self.elementwise("sub", x_refs, m_col, k=1)
        else:
            # w_i = (m + 1) - x_i
            w = self.elementwise("sub", m_col, x_refs, k=1)
        y = self.lookup(tid, w)
        self.booleanity(y)
        total = self.cumulative("sum", y)
        t = self.elementwise("sub", np.asarray([self.const(1)]),
                             np.asarray([total]))
        self.lookup(tid, t, out_refs=np.asarray([self.const(0)], np.int64))
        return m_ref

    # -- finalize -----------------------------------------------------------

    def build(self, instance_meta: dict, weight_layout: list,
              settings_json: str = "", source_digest: str = "") -> ConstraintSystem:
        cs = ConstraintSystem(
            scale=self.scale, regions=self.regions, tables=self.tables,
            consts=np.asarray(self.consts, dtype=np.int64), n_cells=self.n_cells,
            instance_meta=instance_meta, weight_layout=weight_layout,
            settings_json=settings_json, source_digest=source_digest,
        )
        cs.finalize_rows()
        return cs


# ---------------------------------------------------------------------------
# Row evaluation


def row_holds(cs: ConstraintSystem, row: Row, getf: Callable[[int], int]) -> bool:
    """Exact check of one constraint row against resolved field values."""
    kind = row.kind
    if kind == K_NOOP:
        return True
    if kind == K_BOOL:
        a = getf(row.a)
        return (a * a - a) % MODULUS == 0
    if kind == K_LOOKUP:
        table = cs.tables[row.table]
        vin = to_signed(getf(row.a))
        if not table.lo <= vin <= table.hi:
            return False
        return table.lookup(vin) == to_signed(getf(row.out))
    a = getf(row.a)
    out = getf(row.out)
    if kind == K_DOT:
        return (a * getf(row.b) + getf(row.c) - out) % MODULUS == 0
    if kind == K_SUM:
        return (a + getf(row.c) - out) % MODULUS == 0
    if kind == K_PROD:
        return (a * getf(row.c) - out) % MODULUS == 0
    kv = from_signed(row.k)
    if kind == K_ADD:
        return (a + getf(row.b) + kv - out) % MODULUS == 0
    if kind == K_SUB:
        return (a - getf(row.b) + kv - out) % MODULUS == 0
    if kind == K_MUL:
        return (a * getf(row.b) + kv - out) % MODULUS == 0
    raise UnsupportedOpError(f"row kind {kind}")


def evaluate(cs: ConstraintSystem, asg: Assignment):
    """Check every row; returns (ok, first violation or None)."""
    for r, row in enumerate(cs.rows()):
        if not row_holds(cs, row, asg.get_field):
            return False, {"row": r, "kind": KIND_NAMES[row.kind], "detail": row._asdict()}
    return True, None


def check_satisfied(cs: ConstraintSystem, asg: Assignment) -> bool:
    """True iff every argument equation and lookup membership holds exactly."""
    ok, _ = evaluate(cs, asg)
    return ok


# ---------------------------------------------------------------------------
# Functional argument builders (standalone, for direct use and testing)


class MiniSystem(NamedTuple):
    """Result of a standalone argument build: accumulators, rows, system."""

    m: list[int]
    constraints: list[Row]
    system: ConstraintSystem
    assignment: Assignment

    @property
    def satisfiable(self) -> bool:
        return check_satisfied(self.system, self.assignment)


def _mini(values_by_slot: list[int], build, external: dict | None = None) -> MiniSystem:
    b = CircuitBuilder(scale=0)
    inst = np.asarray(values_by_slot, dtype=np.int64)
    inst_refs = (np.arange(len(inst), dtype=np.int64) << 2) | INSTANCE
    acc_refs = build(b, inst_refs)
    cs = b.build({"n_x": len(inst), "n_y": 0, "inputs": [], "outputs": []}, [])
    asg = Assignment(cs.n_cells, inst, np.empty(0, np.int64), cs.consts)
    for region in cs.regions:
        try:
            region.fill(asg, cs, external or {})
        except DomainError:
            pass  # leave cells unassigned; satisfiability will say no
    m = [asg.get_signed(int(r)) for r in np.asarray(acc_refs, np.int64).reshape(-1)]
    return MiniSystem(m, list(cs.rows()), cs, asg)


def _cumulative_values(x, op: str) -> MiniSystem:
    vals = [int(v) for v in x]
    if not vals:
        raise LengthMismatch("need length >= 1")

    def build(b: CircuitBuilder, refs):
        b.cumulative(op, refs)
        region = b.regions[-1]
        return [region._acc_ref(j) for j in range(region.n)]

    return _mini(vals, build)


def cumulative_sum(x) -> MiniSystem:
    """Prefix sums m_1..m_N with one constraint per step (m_0 = 0)."""
    return _cumulative_values(x, "sum")


def cumulative_product(x) -> MiniSystem:
    """Prefix products with one constraint per step (m_0 = 1)."""
    return _cumulative_values(x, "prod")


def cumulative_dot_product(x, y) -> MiniSystem:
    xv, yv = [int(v) for v in x], [int(v) for v in y]
    if len(xv) != len(yv):
        raise LengthMismatch(f"{len(xv)} vs {len(yv)}")
    if not xv:
        raise LengthMismatch("need length >= 1")

    def build(b: CircuitBuilder, refs):
        n = len(xv)
        b.dot(refs[:n][None, :], refs[n:][None, :])
        region = b.regions[-1]
        return [region._acc_ref(0, j) for j in range(region.k_len)]

    return _mini(xv + yv, build)


def elementwise(x, y, op: str) -> MiniSystem:
    xv, yv = [int(v) for v in x], [int(v) for v in y]
    if len(xv) != len(yv):
        raise LengthMismatch(f"{len(xv)} vs {len(yv)}")

    def build(b: CircuitBuilder, refs):
        n = len(xv)
        return b.elementwise(op, refs[:n], refs[n:])

    return _mini(xv + yv, build)


def lookup_apply(x, table: LookupTable) -> MiniSystem:
    xv = [int(v) for v in x]
    local = LookupTable(0, table.kind, table.lo, table.hi,
                        table.in_scale, table.out_scale, table.shift)

    def build(b: CircuitBuilder, refs):
        b.tables = [local]
        b._table_idx = {(local.kind, local.in_scale, local.out_scale, local.shift): 0}
        return b.lookup(0, refs)

    return _mini(xv, build)


def _extremum_system(x, claimed_m: int, which: str) -> MiniSystem:
    xv = [int(v) for v in x]
    if not xv:
        raise LengthMismatch("need length >= 1")
    bound = max(abs(v) for v in xv + [int(claimed_m)]) + 1

    def build(b: CircuitBuilder, refs):
        m = b.extremum_argument(which, refs, bound_units=bound, relu_scale=0)
        # replace the computed claim with an externally supplied one
        claim = FreeRegion(kind="external", label="claim",
                           out_refs=np.asarray([m], np.int64))
        b.regions = [claim if isinstance(r, FreeRegion) else r for r in b.regions]
        return [m]

    return _mini(xv, build, external={"claim": [int(claimed_m)]})


def max_argument(x, claimed_m: int) -> MiniSystem:
    """Constraint set satisfiable iff claimed_m is the true maximum of x."""
    return _extremum_system(x, claimed_m, "max")


def min_argument(x, claimed_m: int) -> MiniSystem:
    """Mirror of :func:`max_argument` (one-unit shift in the other direction)."""
    return _extremum_system(x, claimed_m, "min")


# ---------------------------------------------------------------------------
# Graph lowering


def lower_graph(g: Graph, cal: CalibrationReport) -> ConstraintSystem:
    """Compile a calibrated graph into a constraint system.

    Contractions become per-output-element cumulative dot products followed
    by a floor-rescale lookup; elementwise ops become elementwise arguments
    (products also rescale); activations become table lookups; reductions
    become cumulative or extremum arguments.  Public instance slots are wired
    to the graph inputs and outputs.
    """
    if cal.graph_digest != graph_digest(g):
        raise SchemaError("calibration settings were computed for a different graph")
    lowered = lower_to_einsum(g)
    s = cal.scale
    b = CircuitBuilder(scale=s)
    fused = fused_bias_pairs(lowered)
    fused_eins = {ein: (add_id, bias) for add_id, (ein, bias) in fused.items()}

    # Weight layout: canonical name order, matching the weight digest.
    names = sorted(lowered.weights)
    weight_layout = []
    offsets = {}
    off = 0
    for name in names:
        t = lowered.weights[name]
        weight_layout.append((name, t.size, cal.weight_scales.get(name, s)))
        offsets[name] = off
        off += t.size

    # Instance layout: flattened inputs, then flattened circuit outputs.
    output_nodes = []
    postprocess = []
    circuit_outs = circuit_output_refs(lowered)
    for orig, ref in zip(lowered.outputs, circuit_outs):
        output_nodes.append(ref)
        postprocess.append("argmax" if orig != ref else None)
    n_x = sum(int(np.prod(shape)) for _, shape in lowered.inputs)
    n_y = sum(int(np.prod(lowered.shapes[rf])) for rf in output_nodes)
    instance_meta = {
        "n_x": n_x, "n_y": n_y,
        "inputs": [[name, list(shape)] for name, shape in lowered.inputs],
        "outputs": [[rf, list(lowered.shapes[rf]), post]
                    for rf, post in zip(output_nodes, postprocess)],
    }

    env: dict[str, np.ndarray] = {}
    scales: dict[str, int] = {}
    pos = 0
    for name, shape in lowered.inputs:
        size = int(np.prod(shape))
        env[name] = ((np.arange(pos, pos + size, dtype=np.int64) << 2) | INSTANCE
                     ).reshape(shape)
        scales[name] = s
        pos += size
    out_slots: dict[str, np.ndarray] = {}
    for rf in output_nodes:
        size = int(np.prod(lowered.shapes[rf]))
        out_slots[rf] = ((np.arange(pos, pos + size, dtype=np.int64) << 2) | INSTANCE
                         ).reshape(lowered.shapes[rf])
        pos += size
    for name in names:
        t = lowered.weights[name]
        env[name] = ((np.arange(offsets[name], offsets[name] + t.size,
                                dtype=np.int64) << 2) | WEIGHT).reshape(t.shape)
        scales[name] = cal.weight_scales.get(name, s)

    def units(value: float, scale: int) -> int:
        return int(np.ceil(abs(value) * (1 << scale))) + 1

    def acc_bound_units(node_id: str, scale2: int) -> int:
        # Domains follow the calibrated range rule (observed peak x headroom);
        # inputs outside the calibrated envelope surface as DomainError.
        return units(cal.acc_ranges.get(node_id, 0.0) * cal.headroom, scale2)

    def maybe_out(node_id: str):
        return out_slots.get(node_id)

    def _flat(refs):
        return None if refs is None else refs.reshape(-1)

    def rescale_after(domain_id: str, acc_refs: np.ndarray, from_scale: int,
                      slot_id: str | None = None):
        dom = acc_bound_units(domain_id, from_scale)
        tid = b.table("rescale", from_scale, s, lo=-dom, hi=dom,
                      shift=from_scale - s)
        slot = maybe_out(slot_id if slot_id is not None else domain_id)
        return b.lookup(tid, acc_refs.reshape(-1), out_refs=_flat(slot))

    for node in lowered.nodes:
        op = node.op
        if op == "Einsum":
            if node.attrs.get("gather"):
                src_pos, gmap = gather_structure(lowered, node)
                flat = env[node.inputs[src_pos]].reshape(-1)
                zero = b.const(0)
                out = np.where(gmap >= 0, flat[np.clip(gmap, 0, None)], zero)
                env[node.id] = out.reshape(lowered.shapes[node.id])
                scales[node.id] = scales[node.inputs[src_pos]]
                if node.id in out_slots:
                    env[node.id] = _bind_passthrough(b, env[node.id], out_slots[node.id])
                continue
            sa, sb_ = scales[node.inputs[0]], scales[node.inputs[1]]
            x_r, y_r, k_len = _einsum_ref_matrices(lowered, node, env)
            if node.id in fused_eins:
                add_id, bias = fused_eins[node.id]
                m0 = np.broadcast_to(
                    env[bias], lowered.shapes[node.id]).reshape(-1).astype(np.int64)
                finals = b.dot(x_r, y_r, m0_refs=m0)
                env[node.id] = finals.reshape(lowered.shapes[node.id])
                scales[node.id] = sa + sb_
                rs = rescale_after(node.id, finals, sa + sb_, slot_id=add_id)
                env[add_id] = rs.reshape(lowered.shapes[add_id])
                scales[add_id] = s
            elif k_len == 0:
                # fully elementwise product einsum
                prods = b.elementwise("mul", x_r.reshape(-1), y_r.reshape(-1))
                env[node.id] = rescale_after(node.id, prods, sa + sb_).reshape(
                    lowered.shapes[node.id])
                scales[node.id] = s
            else:
                finals = b.dot(x_r, y_r)
                env[node.id] = rescale_after(node.id, finals, sa + sb_).reshape(
                    lowered.shapes[node.id])
                scales[node.id] = s
        elif op in ("Add", "Sub"):
            if node.id in env:
                continue  # folded bias
            sa, sb_ = scales[node.inputs[0]], scales[node.inputs[1]]
            if sa != sb_:
                raise DomainError(f"node {node.id!r}: operand scale mismatch")
            shape = lowered.shapes[node.id]
            a = np.broadcast_to(env[node.inputs[0]], shape).reshape(-1)
            bb = np.broadcast_to(env[node.inputs[1]], shape).reshape(-1)
            out = b.elementwise("add" if op == "Add" else "sub", a, bb,
                                out_refs=_flat(maybe_out(node.id)))
            env[node.id] = out.reshape(shape)
            scales[node.id] = sa
        elif op == "Mul":
            sa, sb_ = scales[node.inputs[0]], scales[node.inputs[1]]
            shape = lowered.shapes[node.id]
            a = np.broadcast_to(env[node.inputs[0]], shape).reshape(-1)
            bb = np.broadcast_to(env[node.inputs[1]], shape).reshape(-1)
            prods = b.elementwise("mul", a, bb)
            env[node.id] = rescale_after(node.id, prods, sa + sb_).reshape(shape)
            scales[node.id] = s
        elif op == "ReLU":
            si = scales[node.inputs[0]]
            dom = units(cal.range_of(node.inputs[0]), si)
            tid = b.table("relu", si, si, lo=-dom, hi=dom)
            out = b.lookup(tid, env[node.inputs[0]].reshape(-1),
                           out_refs=_flat(maybe_out(node.id)))
            env[node.id] = out.reshape(lowered.shapes[node.id])
            scales[node.id] = si
        elif op in ("Sigmoid", "Exp", "Reciprocal"):
            si = scales[node.inputs[0]]
            dom = units(cal.range_of(node.inputs[0]), si)
            kind = {"Sigmoid": "sigmoid", "Exp": "exp", "Reciprocal": "recip"}[op]
            if kind == "recip":
                min_abs = cal.ranges_min_abs.get(node.inputs[0], 1.0)
                lo = max(1, int(min_abs / cal.headroom * (1 << si)))
                tid = b.table(kind, si, s, lo=lo, hi=max(dom, lo + 1))
            else:
                tid = b.table(kind, si, s, lo=-dom, hi=dom)
            out = b.lookup(tid, env[node.inputs[0]].reshape(-1),
                           out_refs=_flat(maybe_out(node.id)))
            env[node.id] = out.reshape(lowered.shapes[node.id])
            scales[node.id] = s
        elif op == "Sum":
            refs = env[node.inputs[0]].reshape(-1)
            slot = maybe_out(node.id)
            out_ref = int(slot.reshape(-1)[0]) if slot is not None else None
            final = b.cumulative("sum", refs, out_ref=out_ref)
            env[node.id] = np.asarray([final], dtype=np.int64)
            scales[node.id] = scales[node.inputs[0]]
        elif op in ("Max", "Min"):
            si = scales[node.inputs[0]]
            refs = env[node.inputs[0]].reshape(-1)
            bound = units(cal.range_of(node.inputs[0]), si)
            slot = maybe_out(node.id)
            out_ref = int(slot.reshape(-1)[0]) if slot is not None else None
            m = b.extremum_argument("max" if op == "Max" else "min", refs,
                                    bound_units=bound, out_ref=out_ref,
                                    relu_scale=si)
            env[node.id] = np.asarray([m], dtype=np.int64)
            scales[node.id] = si
        elif op == "ArgMax":
            env[node.id] = env[node.inputs[0]].reshape(-1)[:1]
            scales[node.id] = 0
        elif op == "Reshape":
            shape = tuple(node.attrs["shape"])
            env[node.id] = env[node.inputs[0]].reshape(shape)
            scales[node.id] = scales[node.inputs[0]]
            if node.id in out_slots:
                env[node.id] = _bind_passthrough(b, env[node.id], out_slots[node.id])
        elif op == "Constant":
            data = node.attrs["tensor"].data
            vals = np.asarray(
                [_encode_units(v, s) for v in data.reshape(-1)], dtype=np.int64)
            env[node.id] = np.asarray([b.const(int(v)) for v in vals],
                                      dtype=np.int64).reshape(data.shape)
            scales[node.id] = s
            if node.id in out_slots:
                env[node.id] = _bind_passthrough(b, env[node.id], out_slots[node.id])
        else:
            raise UnsupportedOpError(op)

    # Outputs that are plain inputs/weights still need binding rows.
    for rf in output_nodes:
        if rf not in {n.id for n in lowered.nodes}:
            env[rf] = _bind_passthrough(b, env[rf], out_slots[rf])

    cs = b.build(instance_meta, weight_layout, settings_json=cal.to_json(),
                 source_digest=cal.graph_digest)
    return cs


def _encode_units(v: float, scale: int) -> int:
    import math
    units = math.floor(abs(float(v)) * (1 << scale) + 0.5)
    return units if v >= 0 else -units


def _bind_passthrough(b: CircuitBuilder, src_refs: np.ndarray,
                      slot_refs: np.ndarray) -> np.ndarray:
    """Instance binding for values that no argument row produces."""
    flat = src_refs.reshape(-1)
    zero = np.full(len(flat), b.const(0), dtype=np.int64)
    b.elementwise("add", flat, zero, out_refs=slot_refs.reshape(-1))
    return slot_refs


def _einsum_ref_matrices(g: Graph, node, env) -> tuple[np.ndarray, np.ndarray, int]:
    """Reference matrices (n_out, K) for both operands of a contraction.

    K = 0 signals a purely elementwise product (no contracted index); the
    returned arrays are then flat and aligned on the output grid.
    """
    specs, out_spec = graphmod.parse_einsum(node.attrs["equation"])
    shapes = [g.shapes[r] for r in node.inputs]
    extents = graphmod._einsum_extents(node.attrs["equation"], shapes)
    out_letters = list(out_spec)
    contracted = [c for c in sorted(set(specs[0]) | set(specs[1])) if c not in out_spec]

    n_out = int(np.prod([extents[c] for c in out_letters])) if out_letters else 1
    k_len = int(np.prod([extents[c] for c in contracted])) if contracted else 1
    a = _operand_refs(env[node.inputs[0]], specs[0], out_letters + contracted, extents)
    bb = _operand_refs(env[node.inputs[1]], specs[1], out_letters + contracted, extents)
    if not contracted:
        return a.reshape(-1), bb.reshape(-1), 0
    return a.reshape(n_out, k_len).copy(), bb.reshape(n_out, k_len).copy(), k_len


def _operand_refs(refs: np.ndarray, spec: str, order: list[str],
                  extents: dict[str, int]) -> np.ndarray:
    """Broadcast an operand's refs onto the (out..., contracted...) grid."""
    # current axes: spec; target axes: order (superset of spec's letters)
    expand = refs
    # add missing axes
    for letter in order:
        if letter not in spec:
            expand = np.expand_dims(expand, axis=-1)
    # now transpose existing axes into target order
    cur_letters = list(spec) + [l for l in order if l not in spec]
    perm = [cur_letters.index(l) for l in order]
    expand = np.transpose(expand, perm)
    target_shape = [extents[l] for l in order]
    return np.broadcast_to(expand, target_shape)
