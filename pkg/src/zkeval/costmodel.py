"""Cost prediction from constraint counts, and the measurement harness.

Proving cost is driven by the padded row count (constraints rounded up to
the next power of two), so coefficients are fitted against padded rows;
raw-constraint fits are reported alongside for comparison.  Once a model is
profiled for operations the total cost of a dataset-sized evaluation is a
multiplication away.
"""

from __future__ import annotations

import csv
import json
import platform
import time
import tracemalloc
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import models
from .calibration import calibrate
from .circuit import lower_graph, padded_row_count
from .errors import InsufficientData
from .graph import Graph, count_macs, count_ops
from .prover import prove, setup, verify
from .witness import make_witness

# Bench proofs pin q to a width-independent value (lam dominates, fraction
# off) so the verify-time pattern is not confounded by q growing with rows.
BENCH_LAMBDA = 1024
BENCH_FRACTION = 0.0

RESOURCES = ("prove_time", "pk_bytes", "peak_memory")


def machine_descriptor() -> dict:
    import os
    return {
        "platform": platform.platform(),
        "python": platform.python_version(),
        "cpus": os.cpu_count(),
    }


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r2: float

    def predict(self, x: float) -> float:
        return max(self.slope * x + self.intercept, 0.0)


@dataclass
class CostCoefficients:
    """Per-resource linear models against padded rows (and raw constraints)."""

    by_padded: dict[str, LinearFit]
    by_n_con: dict[str, LinearFit]
    machine: dict
    fitted_at: str
    n_points: int

    def to_json(self) -> str:
        doc = {
            "by_padded": {k: vars(v) for k, v in self.by_padded.items()},
            "by_n_con": {k: vars(v) for k, v in self.by_n_con.items()},
            "machine": self.machine,
            "fitted_at": self.fitted_at,
            "n_points": self.n_points,
        }
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CostCoefficients":
        doc = json.loads(text)
        return cls(
            by_padded={k: LinearFit(**v) for k, v in doc["by_padded"].items()},
            by_n_con={k: LinearFit(**v) for k, v in doc["by_n_con"].items()},
            machine=doc["machine"], fitted_at=doc["fitted_at"],
            n_points=doc["n_points"],
        )


@dataclass
class CostEstimate:
    n_con: int
    padded_rows: int
    prove_time: float
    pk_bytes: float
    peak_memory: float
    dataset_size: int
    dataset_total_time: float


def _linear_fit(x: np.ndarray, y: np.ndarray) -> LinearFit:
    slope, intercept = np.polyfit(x, y, 1)
    pred = slope * x + intercept
    ss_res = float(np.sum((y - pred) ** 2))
    ss_tot = float(np.sum((y - np.mean(y)) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return LinearFit(float(slope), float(intercept), r2)


def fit(measurements) -> CostCoefficients:
    """Least-squares coefficients from (n_con, prove_time, pk_bytes, peak_mem).

    Accepts tuples or measurement dicts; needs at least three distinct
    padded-row values so the line is actually determined by the data.
    """
    rows = []
    for m in measurements:
        if isinstance(m, dict):
            rows.append((m["n_con"], m["prove_time"], m["pk_bytes"], m["peak_memory"]))
        else:
            rows.append(tuple(m))
    padded = np.asarray([padded_row_count(r[0]) for r in rows], dtype=np.float64)
    if len(set(padded.tolist())) < 3:
        raise InsufficientData("need measurements at >= 3 distinct padded-row counts")
    n_con = np.asarray([r[0] for r in rows], dtype=np.float64)
    by_padded, by_n_con = {}, {}
    for i, name in enumerate(RESOURCES):
        y = np.asarray([r[1 + i] for r in rows], dtype=np.float64)
        by_padded[name] = _linear_fit(padded, y)
        by_n_con[name] = _linear_fit(n_con, y)
        if by_padded[name].slope <= 0:
            raise InsufficientData(f"{name} does not scale positively in the data")
    return CostCoefficients(by_padded, by_n_con, machine_descriptor(),
                            time.strftime("%Y-%m-%dT%H:%M:%S"), len(rows))


def estimate(coeffs: CostCoefficients, n_con: int, dataset_size: int) -> CostEstimate:
    """Per-proof prediction at the padded row count, times the dataset size."""
    padded = padded_row_count(n_con)
    per_proof = coeffs.by_padded["prove_time"].predict(padded)
    return CostEstimate(
        n_con=n_con,
        padded_rows=padded,
        prove_time=per_proof,
        pk_bytes=coeffs.by_padded["pk_bytes"].predict(padded),
        peak_memory=coeffs.by_padded["peak_memory"].predict(padded),
        dataset_size=dataset_size,
        dataset_total_time=per_proof * dataset_size,
    )


# ---------------------------------------------------------------------------
# Measurement harness


def measure_model(name: str, g: Graph, samples, *, mode: str = "accuracy",
                  lam: int = BENCH_LAMBDA, fraction: float = BENCH_FRACTION,
                  seed: int = 0) -> dict:
    """Compile, key, witness, prove, and verify one model; record everything."""
    rng = np.random.default_rng(seed)
    cal = calibrate(g, samples, mode=mode)
    cs = lower_graph(g, cal)
    t0 = time.perf_counter()
    pk, vk = setup(cs, g.weights, lam=lam)
    setup_time = time.perf_counter() - t0

    x = samples[0]
    t0 = time.perf_counter()
    w = make_witness(g, cal, x, circuit=cs)
    witness_time = time.perf_counter() - t0

    tracemalloc.start()
    t0 = time.perf_counter()
    proof = prove(pk, w, mode="spot_check", lam=lam, fraction=fraction)
    prove_time = time.perf_counter() - t0
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()

    proof_bytes = proof.to_bytes()
    t0 = time.perf_counter()
    res = verify(vk, proof, w.x_tilde, w.y_tilde)
    verify_time = time.perf_counter() - t0
    assert res.ok, res.reason

    ops = count_ops(g)
    return {
        "name": name,
        "params": g.n_parameters(),
        "macs": ops["macs"],
        "element_ops": ops["element_ops"],
        "n_con": cs.n_con,
        "padded_rows": cs.padded_rows,
        "scale": cal.scale,
        "setup_time": setup_time,
        "witness_time": witness_time,
        "prove_time": prove_time,
        "verify_time": verify_time,
        "proof_bytes": len(proof_bytes),
        "pk_bytes": pk.size_bytes,
        "vk_bytes": len(vk.to_bytes()),
        "peak_memory": peak,
    }


def bench_width_sweep(widths=(16, 32, 64, 128, 256), *, in_dim: int = 784,
                      out_dim: int = 10, n_samples: int = 6, seed: int = 0,
                      mode: str = "accuracy") -> list[dict]:
    """MLP width sweep: the constraints-vs-operations scaling measurement."""
    rng = np.random.default_rng(seed)
    samples = models.sparse_grid_inputs(rng, n_samples, (in_dim,))
    records = []
    for w in widths:
        g = models.mlp_graph(in_dim, w, out_dim, seed=seed + w)
        records.append(measure_model(f"mlp-{in_dim}x{w}x{out_dim}", g, samples,
                                     mode=mode, seed=seed))
    return records


def save_records(records: list[dict], csv_path=None, json_path=None) -> None:
    if csv_path:
        with open(csv_path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(records[0]))
            writer.writeheader()
            writer.writerows(records)
    if json_path:
        Path(json_path).write_text(json.dumps(
            {"machine": machine_descriptor(), "records": records},
            indent=1, sort_keys=True))


_TABLE_COLUMNS = [
    ("Model", "name", "{}"),
    ("Params", "params", "{}"),
    ("MACs", "macs", "{}"),
    ("Constraints", "n_con", "{}"),
    ("Prove (s)", "prove_time", "{:.3f}"),
    ("Verify (s)", "verify_time", "{:.4f}"),
    ("Proof", "proof_bytes", "{}"),
    ("PK", "pk_bytes", "{}"),
    ("VK", "vk_bytes", "{}"),
]


def format_table(records: list[dict]) -> str:
    headers = [h for h, _, _ in _TABLE_COLUMNS]
    rows = [[fmt.format(r[key]) for _, key, fmt in _TABLE_COLUMNS]
            for r in records]
    widths = [max(len(h), *(len(row[i]) for row in rows))
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in rows]
    return "\n".join(lines)


def report_table(named_models: list[tuple[str, Graph]], *, n_samples: int = 6,
                 seed: int = 0, mode: str = "accuracy",
                 lam: int = BENCH_LAMBDA, fraction: float = BENCH_FRACTION):
    """Measured resource/time table for a list of models.

    All values are measured on this backend and this machine; they follow
    the qualitative patterns of commitment-based provers (verify and proof
    sizes small and flat, proving cost and key size growing with rows).
    """
    records = []
    for name, g in named_models:
        rng = np.random.default_rng(seed)
        shape = g.inputs[0][1]
        samples = models.dense_grid_inputs(rng, n_samples, shape, lo=0.0, hi=1.0)
        records.append(measure_model(name, g, samples, mode=mode,
                                     lam=lam, fraction=fraction, seed=seed))
    return records, format_table(records)
