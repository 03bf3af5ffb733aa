"""Prime-field arithmetic and fixed-point encoding of real values.

The field is F_p with p = 2^64 - 2^32 + 1, a 64-bit-friendly prime with
enough headroom that scale-7 dot products over vectors of length up to 2^16
cannot wrap.  Reals are represented on the grid r ~ v / 2^s using a centered
encoding: the lower half of the field holds non-negative values and the top
half holds negatives (encode(-r) = p - encode(r)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

MODULUS = (1 << 64) - (1 << 32) + 1
# Boundary between the non-negative encodings [0, HALF_RANGE] and the
# negative encodings (HALF_RANGE, p).
HALF_RANGE = MODULUS // 2

DEFAULT_SCALE = 7


class FieldElement:
    """An element of F_p, stored as an int in [0, p)."""

    __slots__ = ("value",)

    def __init__(self, value: int):
        self.value = value % MODULUS

    def __repr__(self) -> str:
        return f"FieldElement({self.value})"

    def __int__(self) -> int:
        return self.value

    def __hash__(self) -> int:
        return hash(self.value)

    def __eq__(self, other) -> bool:
        if isinstance(other, FieldElement):
            return self.value == other.value
        if isinstance(other, int):
            return self.value == other % MODULUS
        return NotImplemented

    def __add__(self, other: "FieldElement") -> "FieldElement":
        return FieldElement(self.value + _val(other))

    def __sub__(self, other: "FieldElement") -> "FieldElement":
        return FieldElement(self.value - _val(other))

    def __mul__(self, other: "FieldElement") -> "FieldElement":
        return FieldElement(self.value * _val(other))

    def __neg__(self) -> "FieldElement":
        return FieldElement(-self.value)

    def __pow__(self, exponent: int) -> "FieldElement":
        return FieldElement(pow(self.value, exponent, MODULUS))

    def inverse(self) -> "FieldElement":
        if self.value == 0:
            raise ZeroDivisionError("zero has no multiplicative inverse")
        return FieldElement(pow(self.value, MODULUS - 2, MODULUS))


def _val(x) -> int:
    return x.value if isinstance(x, FieldElement) else int(x)


def add(a: FieldElement, b: FieldElement) -> FieldElement:
    """(a + b) mod p."""
    return FieldElement(_val(a) + _val(b))


def sub(a: FieldElement, b: FieldElement) -> FieldElement:
    """(a - b) mod p."""
    return FieldElement(_val(a) - _val(b))


def mul(a: FieldElement, b: FieldElement) -> FieldElement:
    """(a * b) mod p."""
    return FieldElement(_val(a) * _val(b))


def to_signed(v: int) -> int:
    """Centered representative of a field value: results in (-p/2, p/2]."""
    v %= MODULUS
    return v if v <= HALF_RANGE else v - MODULUS


def from_signed(s: int) -> int:
    """Field value of a signed integer (inverse of :func:`to_signed`)."""
    return s % MODULUS


@dataclass(frozen=True)
class FixedPointCodec:
    """Maps reals onto the integer grid r * 2^scale inside the field.

    ``encode(0) == 0`` and ``encode(-r) == p - encode(r)``; the decode of any
    on-grid, in-range value round-trips exactly.
    """

    scale: int = DEFAULT_SCALE

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("scale must be a non-negative integer")

    @property
    def step(self) -> float:
        return 1.0 / (1 << self.scale)

    def encode(self, r: float) -> int:
        """Round r onto the grid; ties round half away from zero."""
        scaled = abs(float(r)) * (1 << self.scale)
        units = math.floor(scaled + 0.5)
        if units >= HALF_RANGE:
            raise OverflowError(
                f"value {r!r} at scale {self.scale} exceeds the field half-range"
            )
        return units % MODULUS if r >= 0 else (-units) % MODULUS

    def decode(self, v: int) -> float:
        """Inverse of encode on the representable grid."""
        return to_signed(v) / (1 << self.scale)

    def encode_signed_units(self, r: float) -> int:
        """Like encode but returns the signed grid integer, not a field value."""
        scaled = abs(float(r)) * (1 << self.scale)
        units = math.floor(scaled + 0.5)
        if units >= HALF_RANGE:
            raise OverflowError(
                f"value {r!r} at scale {self.scale} exceeds the field half-range"
            )
        return units if r >= 0 else -units


def encode(r: float, codec: FixedPointCodec) -> FieldElement:
    """Field encoding of a real at the codec's scale."""
    return FieldElement(codec.encode(r))


def decode(v, codec: FixedPointCodec) -> float:
    """Real value of a field element at the codec's scale."""
    return codec.decode(_val(v))


def rescale(v, from_scale: int, to_scale: int) -> FieldElement:
    """Bring a value from a fine grid onto a coarser one.

    Floor-division toward negative infinity on the real line, so each input
    has exactly one well-defined image (one lookup-table entry per input).
    """
    if from_scale < to_scale:
        raise ValueError(f"cannot rescale upward: {from_scale} -> {to_scale}")
    sv = to_signed(_val(v))
    if abs(sv) >= HALF_RANGE:
        raise OverflowError("intermediate magnitude exceeds the field half-range")
    return FieldElement(from_signed(sv >> (from_scale - to_scale)))


def rescale_signed(sv: int, from_scale: int, to_scale: int) -> int:
    """Signed-integer form of :func:`rescale` (arithmetic shift floors)."""
    if from_scale < to_scale:
        raise ValueError(f"cannot rescale upward: {from_scale} -> {to_scale}")
    if abs(sv) >= HALF_RANGE:
        raise OverflowError("intermediate magnitude exceeds the field half-range")
    return sv >> (from_scale - to_scale)
