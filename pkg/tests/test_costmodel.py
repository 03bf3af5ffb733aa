"""Cost-model fitting, estimation, and rounding-law tests."""

import numpy as np
import pytest

from zkeval import costmodel as CM
from zkeval.circuit import padded_row_count
from zkeval.errors import InsufficientData


def _synthetic(n_cons, slope_t=2e-6, slope_pk=80.0, slope_mem=16.0,
               intercept=0.01, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    rows = []
    for n in n_cons:
        p = padded_row_count(n)
        jitter = 1 + noise * rng.standard_normal()
        rows.append({
            "n_con": n,
            "prove_time": (slope_t * p + intercept) * jitter,
            "pk_bytes": slope_pk * p + 1000,
            "peak_memory": slope_mem * p + 500,
        })
    return rows


def test_exactly_linear_data_recovered():
    rows = _synthetic([100, 500, 3000, 20000, 100000])
    coeffs = CM.fit(rows)
    assert coeffs.by_padded["prove_time"].slope == pytest.approx(2e-6, rel=1e-6)
    assert coeffs.by_padded["prove_time"].r2 == pytest.approx(1.0)
    assert coeffs.by_padded["pk_bytes"].r2 == pytest.approx(1.0)


def test_two_points_insufficient():
    with pytest.raises(InsufficientData):
        CM.fit(_synthetic([100, 5000]))
    # three points but only two distinct padded-row counts
    with pytest.raises(InsufficientData):
        CM.fit(_synthetic([1000, 1001, 5000]))


def test_estimate_rounding_jump():
    coeffs = CM.fit(_synthetic([100, 500, 3000, 20000]))
    just_below = CM.estimate(coeffs, 1024, 1)
    just_above = CM.estimate(coeffs, 1025, 1)
    assert just_above.padded_rows == 2 * just_below.padded_rows
    assert just_above.prove_time > just_below.prove_time


def test_estimate_zero_dataset():
    coeffs = CM.fit(_synthetic([100, 500, 3000]))
    assert CM.estimate(coeffs, 5000, 0).dataset_total_time == 0


def test_estimate_monotone_in_n_con():
    coeffs = CM.fit(_synthetic([100, 500, 3000, 20000]))
    times = [CM.estimate(coeffs, n, 1).prove_time
             for n in (1, 10, 100, 1000, 10_000, 100_000)]
    assert all(b >= a for a, b in zip(times, times[1:]))


def test_leave_one_out_prediction_quality():
    rows = _synthetic([200, 900, 4000, 17000, 70000], noise=0.03, seed=4)
    held = rows.pop(2)
    coeffs = CM.fit(rows)
    got = CM.estimate(coeffs, held["n_con"], 1).prove_time
    assert abs(got - held["prove_time"]) / held["prove_time"] <= 0.25


def test_rounding_law_sampled_and_midrange():
    # the exhaustive [1, 2^24] sweep lives in the acceptance suite
    n = np.arange(1, (1 << 20) + 1, dtype=np.int64)
    powers = np.asarray([1 << k for k in range(25)], dtype=np.int64)
    expected = powers[np.searchsorted(powers, n, side="left")]
    got = np.fromiter((padded_row_count(int(v)) for v in n), dtype=np.int64,
                      count=len(n))
    assert np.array_equal(got, expected)
    for v, want in [(1, 1), (2, 2), (3, 4), (1 << 24, 1 << 24),
                    ((1 << 24) - 1, 1 << 24), ((1 << 24) + 1, 1 << 25)]:
        assert padded_row_count(v) == want


def test_round_trip_serialization():
    coeffs = CM.fit(_synthetic([100, 500, 3000, 20000]))
    again = CM.CostCoefficients.from_json(coeffs.to_json())
    assert again.to_json() == coeffs.to_json()


def test_format_table_alignment():
    records = [
        {"name": "tiny", "params": 10, "macs": 20, "n_con": 30,
         "prove_time": 0.001, "verify_time": 0.0005, "proof_bytes": 100,
         "pk_bytes": 10_000, "vk_bytes": 200},
    ]
    table = CM.format_table(records)
    assert "tiny" in table and "Constraints" in table
