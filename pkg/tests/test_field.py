"""Field arithmetic and fixed-point codec tests."""

import math
import random

import pytest

from zkeval import field
from zkeval.field import (
    MODULUS,
    HALF_RANGE,
    FieldElement,
    FixedPointCodec,
    add,
    mul,
    sub,
    encode,
    decode,
    rescale,
)


def egcd(a, b):
    if a == 0:
        return b, 0, 1
    g, x, y = egcd(b % a, a)
    return g, y - (b // a) * x, x


def test_modulus_is_the_64bit_friendly_prime():
    assert MODULUS == 2**64 - 2**32 + 1


def test_add_identities():
    x = FieldElement(12345)
    assert add(FieldElement(0), x) == x
    assert add(FieldElement(MODULUS - 1), FieldElement(1)) == FieldElement(0)
    assert add(FieldElement(3), FieldElement(5)) == FieldElement(8)


def test_mul_identities():
    x = FieldElement(987654321)
    assert mul(FieldElement(1), x) == x
    assert mul(FieldElement(0), x) == FieldElement(0)


def test_mul_inverse_of_two_matches_extended_gcd():
    # (p + 1) / 2 is the inverse of 2; cross-check with an egcd oracle.
    half = (MODULUS + 1) // 2
    g, inv2, _ = egcd(2, MODULUS)
    assert g == 1
    assert inv2 % MODULUS == half
    assert mul(FieldElement(2), FieldElement(half)) == FieldElement(1)


def test_field_axioms_randomized():
    rng = random.Random(0xF1E1D)
    for _ in range(10_000):
        a, b, c = (rng.randrange(MODULUS) for _ in range(3))
        fa, fb, fc = FieldElement(a), FieldElement(b), FieldElement(c)
        assert add(add(fa, fb), fc) == add(fa, add(fb, fc))
        assert mul(mul(fa, fb), fc) == mul(fa, mul(fb, fc))
        assert mul(fa, add(fb, fc)) == add(mul(fa, fb), mul(fa, fc))
        assert add(fa, fb) == add(fb, fa)
        assert mul(fa, fb) == mul(fb, fa)
        if a != 0:
            assert mul(fa, fa.inverse()) == FieldElement(1)


def test_encode_examples():
    codec = FixedPointCodec(scale=7)
    assert encode(0.0, codec) == FieldElement(0)
    assert encode(1.0, codec) == FieldElement(128)
    assert encode(-0.5, codec) == FieldElement(MODULUS - 64)


def test_encode_negation_rule():
    codec = FixedPointCodec(scale=7)
    for r in (0.25, 1.0, 3.75, 100.0):
        assert encode(-r, codec).value == MODULUS - encode(r, codec).value


def test_encode_ties_round_half_away_from_zero():
    codec = FixedPointCodec(scale=1)  # grid 0.5
    assert codec.encode(0.25) == 1  # 0.5 units -> 1
    assert codec.encode(-0.25) == MODULUS - 1


def test_encode_overflow():
    codec = FixedPointCodec(scale=7)
    with pytest.raises(OverflowError):
        codec.encode(float(HALF_RANGE))  # way past the boundary


def test_decode_examples():
    codec = FixedPointCodec(scale=7)
    assert decode(FieldElement(128), codec) == 1.0
    assert decode(FieldElement(MODULUS - 64), codec) == -0.5


def test_round_trip_on_grid():
    codec = FixedPointCodec(scale=7)
    rng = random.Random(7)
    for _ in range(1000):
        r = rng.uniform(-100, 100)
        grid = math.floor(abs(r) * 128 + 0.5) / 128.0 * (1 if r >= 0 else -1)
        assert decode(encode(grid, codec), codec) == grid


def test_encode_injective_on_grid():
    codec = FixedPointCodec(scale=4)
    values = [i / 16.0 for i in range(-200, 201)]
    images = {codec.encode(v) for v in values}
    assert len(images) == len(values)


def test_exact_additive_homomorphism():
    codec = FixedPointCodec(scale=7)
    rng = random.Random(21)
    for _ in range(500):
        a = rng.randrange(-10_000, 10_000) / 128.0
        b = rng.randrange(-10_000, 10_000) / 128.0
        total = decode(add(encode(a, codec), encode(b, codec)), codec)
        assert total == a + b


def test_rescale_examples():
    assert rescale(encode(1.5, FixedPointCodec(14)), 14, 7) == encode(1.5, FixedPointCodec(7))
    assert rescale(encode(0.005, FixedPointCodec(14)), 14, 7) == FieldElement(0)
    x = encode(2.375, FixedPointCodec(9))
    assert rescale(x, 9, 9) == x


def test_rescale_floors_toward_negative_infinity():
    # -0.005 is below the s=7 grid; floor lands on -1/128, not 0.
    v = encode(-0.005, FixedPointCodec(14))
    assert rescale(v, 14, 7) == encode(-1 / 128, FixedPointCodec(7))


def test_rescale_rejects_upward():
    with pytest.raises(ValueError):
        rescale(FieldElement(1), 7, 8)


def test_signed_round_trip():
    for s in (0, 1, -1, 17, -17, HALF_RANGE, -(HALF_RANGE - 1)):
        assert field.to_signed(field.from_signed(s)) == s
