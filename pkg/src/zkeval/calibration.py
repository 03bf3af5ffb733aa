"""Scale calibration: pick fixed-point grids under an accuracy/resource budget.

Calibration runs the model twice per candidate scale - once in float, once in
a functional fixed-point simulation that mirrors circuit semantics exactly
(floor rescaling after products, grid-quantized nonlinearities) - and picks
the smallest scale whose worst-case relative output error meets the mode's
bound.  The report also records per-tensor value ranges and worst-case
accumulator bounds, which later size the lookup tables.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from . import graph as graphmod
from .errors import CalibrationFailure, DomainError, UnsupportedOpError
from .field import HALF_RANGE
from .graph import Graph, fused_bias_pairs, gather_structure, lower_to_einsum

SCALE_RANGE = (4, 16)
ACCURACY_THRESHOLD = 0.01
RESOURCES_THRESHOLD = 0.05
RANGE_HEADROOM = 2.0

# Tables above this many entries are rejected as a resource limit.
MAX_TABLE_ENTRIES = 1 << 23


def graph_digest(g: Graph) -> str:
    doc = graphmod.graph_to_document(g)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


@dataclass
class CalibrationReport:
    """Chosen scales plus the measurements that justified them."""

    graph_digest: str
    mode: str
    scale: int
    weight_scales: dict[str, int]
    per_node_scale: dict[str, int]
    ranges: dict[str, float]            # observed max |value| per tensor
    ranges_min_abs: dict[str, float]    # observed min |value| (reciprocal domains)
    acc_ranges: dict[str, float]        # observed pre-rescale accumulator peaks
    acc_bounds: dict[str, float]        # worst-case interval bounds (table sizing)
    error_bound: float                  # certified envelope: headroom x threshold
    max_rel_err: float
    mean_rel_err: float
    sweep: dict[int, float]             # scale -> max relative error
    est_table_entries: int
    est_n_con: int
    headroom: float = RANGE_HEADROOM
    thresholds: dict = dc_field(default_factory=dict)

    def range_of(self, name: str) -> float:
        return self.ranges.get(name, 0.0) * self.headroom

    def to_json(self) -> str:
        doc = dict(self.__dict__)
        doc["sweep"] = {str(k): v for k, v in self.sweep.items()}
        return json.dumps(doc, sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationReport":
        doc = json.loads(text)
        doc["sweep"] = {int(k): v for k, v in doc["sweep"].items()}
        return cls(**doc)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "CalibrationReport":
        return cls.from_json(Path(path).read_text())


# ---------------------------------------------------------------------------
# Fixed-point functional simulation (the semantic model the circuit enforces)


def _encode_vec(real: np.ndarray, scale: int) -> np.ndarray:
    """Grid-quantize an array; ties round half away from zero."""
    scaled = np.abs(np.asarray(real, dtype=np.float64)) * float(1 << scale)
    if np.any(scaled >= float(HALF_RANGE)):
        raise OverflowError("value exceeds the field half-range at this scale")
    units = np.floor(scaled + 0.5)
    return np.where(np.asarray(real) >= 0, units, -units).astype(np.int64)


def _quantized_fn(op: str):
    if op == "Sigmoid":
        return lambda x: 1.0 / (1.0 + np.exp(-x))
    if op == "Exp":
        return np.exp
    if op == "Reciprocal":
        return lambda x: 1.0 / x
    raise UnsupportedOpError(op)


def simulate_quantized(g: Graph, report_or_scale, x, return_env: bool = False):
    """Run the graph in fixed point; returns decoded float outputs.

    ``g`` must already be einsum-lowered.  This is a pure functional model
    of the circuit arithmetic (tables evaluated on demand), usable before
    any circuit exists.
    """
    if isinstance(report_or_scale, CalibrationReport):
        s = report_or_scale.scale
        wscales = report_or_scale.weight_scales
    else:
        s = int(report_or_scale)
        wscales = {}
    fused = fused_bias_pairs(g)
    fused_biases = {ein: (add_id, bias) for add_id, (ein, bias) in fused.items()}

    env: dict[str, np.ndarray] = {}
    scales: dict[str, int] = {}
    if isinstance(x, dict):
        for name, _ in g.inputs:
            env[name] = _encode_vec(np.asarray(x[name]), s)
            scales[name] = s
    else:
        env[g.inputs[0][0]] = _encode_vec(np.asarray(x), s)
        scales[g.inputs[0][0]] = s
    for name, t in g.weights.items():
        ws = wscales.get(name, s)
        env[name] = _encode_vec(t.data, ws)
        scales[name] = ws

    for node in g.nodes:
        op = node.op
        vals = [env[r] for r in node.inputs]
        if op == "Einsum":
            if node.attrs.get("gather"):
                src_pos, gmap = gather_structure(g, node)
                flat = vals[src_pos].reshape(-1)
                out = np.where(gmap >= 0, flat[np.clip(gmap, 0, None)], 0)
                env[node.id] = out.reshape(g.shapes[node.id])
                scales[node.id] = scales[node.inputs[src_pos]]
                continue
            sa, sb = (scales[r] for r in node.inputs)
            acc = np.einsum(node.attrs["equation"], *vals).reshape(g.shapes[node.id])
            if node.id in fused_biases:
                add_id, bias = fused_biases[node.id]
                bias_units = _encode_vec(g.weights[bias].data, sa + sb)
                env[node.id] = acc  # raw accumulator; rescale happens at the Add
                scales[node.id] = sa + sb
                env[add_id] = np.floor_divide(
                    acc + np.broadcast_to(bias_units, acc.shape), 1 << (sa + sb - s)
                )
                scales[add_id] = s
            else:
                env[node.id] = np.floor_divide(acc, 1 << (sa + sb - s))
                scales[node.id] = s
        elif op == "Add" or op == "Sub":
            if node.id in env:
                continue  # folded into the preceding contraction
            sa, sb = (scales[r] for r in node.inputs)
            if sa != sb:
                raise DomainError(f"node {node.id!r}: scale mismatch {sa} vs {sb}")
            env[node.id] = vals[0] + vals[1] if op == "Add" else vals[0] - vals[1]
            scales[node.id] = sa
        elif op == "Mul":
            sa, sb = (scales[r] for r in node.inputs)
            env[node.id] = np.floor_divide(vals[0] * vals[1], 1 << (sa + sb - s))
            scales[node.id] = s
        elif op == "ReLU":
            env[node.id] = np.maximum(vals[0], 0)
            scales[node.id] = scales[node.inputs[0]]
        elif op in ("Sigmoid", "Exp", "Reciprocal"):
            si = scales[node.inputs[0]]
            fn = _quantized_fn(op)
            env[node.id] = _encode_vec(fn(vals[0] / float(1 << si)), s)
            scales[node.id] = s
        elif op == "Sum":
            env[node.id] = np.asarray([vals[0].sum()])
            scales[node.id] = scales[node.inputs[0]]
        elif op == "Max":
            env[node.id] = np.asarray([vals[0].max()])
            scales[node.id] = scales[node.inputs[0]]
        elif op == "Min":
            env[node.id] = np.asarray([vals[0].min()])
            scales[node.id] = scales[node.inputs[0]]
        elif op == "ArgMax":
            env[node.id] = np.asarray([int(np.argmax(vals[0].reshape(-1)))])
            scales[node.id] = 0
        elif op == "Reshape":
            env[node.id] = vals[0].reshape(tuple(node.attrs["shape"]))
            scales[node.id] = scales[node.inputs[0]]
        elif op == "Constant":
            env[node.id] = _encode_vec(node.attrs["tensor"].data, s)
            scales[node.id] = s
        else:
            raise UnsupportedOpError(op)

    outs = [env[r] / float(1 << scales[r]) for r in g.outputs]
    if return_env:
        return outs[0] if len(outs) == 1 else outs, env, scales
    return outs[0] if len(outs) == 1 else outs


# ---------------------------------------------------------------------------
# Range collection


def _float_env(g: Graph, x) -> dict[str, np.ndarray]:
    env: dict[str, np.ndarray] = {}
    if isinstance(x, dict):
        for name, _ in g.inputs:
            env[name] = np.asarray(x[name], dtype=np.float64)
    else:
        env[g.inputs[0][0]] = np.asarray(x, dtype=np.float64)
    for name, t in g.weights.items():
        env[name] = t.data
    for node in g.nodes:
        env[node.id] = graphmod._eval_node(node, [env[r] for r in node.inputs])
    return env


def _abs_bound_env(g: Graph, input_ranges: dict[str, float],
                   observed: dict[str, float]) -> dict[str, np.ndarray]:
    """Elementwise worst-case |value| bounds propagated through the graph.

    Used to size accumulator lookup domains so that any input within the
    calibrated input range stays inside every table.  Reciprocal breaks
    simple interval propagation, so its bound falls back to the observed
    range with headroom.
    """
    env: dict[str, np.ndarray] = {}
    for name, shape in g.inputs:
        env[name] = np.full(shape, input_ranges[name])
    for name, t in g.weights.items():
        env[name] = np.abs(t.data)
    for node in g.nodes:
        vals = [env[r] for r in node.inputs]
        op = node.op
        if op == "Einsum":
            env[node.id] = np.einsum(node.attrs["equation"], *vals).reshape(
                g.shapes[node.id])
        elif op in ("Add", "Sub"):
            env[node.id] = vals[0] + vals[1]
        elif op == "Mul":
            env[node.id] = vals[0] * vals[1]
        elif op == "ReLU":
            env[node.id] = vals[0]
        elif op == "Sigmoid":
            env[node.id] = np.minimum(np.ones_like(vals[0]), 1.0)
        elif op == "Exp":
            env[node.id] = np.exp(vals[0])
        elif op == "Reciprocal":
            env[node.id] = np.full(g.shapes[node.id],
                                   observed.get(node.id, 1.0) * RANGE_HEADROOM)
        elif op == "Sum":
            env[node.id] = np.asarray([vals[0].sum()])
        elif op in ("Max", "Min"):
            env[node.id] = np.asarray([vals[0].max()])
        elif op == "ArgMax":
            env[node.id] = np.asarray([float(np.prod(g.shapes[node.inputs[0]]))])
        elif op == "Reshape":
            env[node.id] = vals[0].reshape(tuple(node.attrs["shape"]))
        elif op == "Constant":
            env[node.id] = np.abs(node.attrs["tensor"].data)
        else:
            raise UnsupportedOpError(op)
    return env


def circuit_output_refs(g: Graph) -> list[str]:
    """Graph outputs with ArgMax postprocessing peeled off.

    The class decision is public postprocessing on the final logits, so the
    quantization error budget (and the circuit) applies to the logits.
    """
    refs = []
    for ref in g.outputs:
        try:
            node = g.node_by_id(ref)
        except KeyError:
            refs.append(ref)
            continue
        refs.append(node.inputs[0] if node.op == "ArgMax" else ref)
    return refs


def _sample_error(g: Graph, scale: int, x, denoms: dict[str, float]) -> float:
    """Worst output deviation, relative to the model's output magnitude.

    The denominator is the calibration set's peak |output| per tensor, not
    the per-sample peak: outputs that cross zero (margins, logits) would
    otherwise make the relative error meaningless.
    """
    refs = circuit_output_refs(g)
    fenv = _float_env(g, x)
    _, qenv, qscales = simulate_quantized(g, scale, x, return_env=True)
    worst = 0.0
    for ref in refs:
        f = np.asarray(fenv[ref], dtype=np.float64)
        q = qenv[ref] / float(1 << qscales[ref])
        worst = max(worst, float(np.max(np.abs(q - f))) / denoms[ref])
    return worst


# ---------------------------------------------------------------------------


def estimate_constraints(g: Graph) -> int:
    """Constraint count the lowering will produce, by the same counting rules."""
    fused = fused_bias_pairs(g)
    fused_adds = set(fused)
    total = 0
    for node in g.nodes:
        size = int(np.prod(g.shapes[node.id]))
        if node.op == "Einsum":
            if node.attrs.get("gather"):
                continue
            extents = graphmod._einsum_extents(
                node.attrs["equation"], [g.shapes[r] for r in node.inputs])
            total += int(np.prod(list(extents.values()))) + size  # steps + rescale
        elif node.op in ("Add", "Sub"):
            if node.id not in fused_adds:
                total += size
        elif node.op == "Mul":
            total += 2 * size
        elif node.op in ("ReLU", "Sigmoid", "Exp", "Reciprocal"):
            total += size
        elif node.op == "Sum":
            total += int(np.prod(g.shapes[node.inputs[0]]))
        elif node.op in ("Max", "Min"):
            n = int(np.prod(g.shapes[node.inputs[0]]))
            total += 4 * n + 2
    return total


def _estimate_table_entries(g: Graph, scale: int, acc_ranges: dict[str, float],
                            ranges: dict[str, float]) -> int:
    rescale_dom = 0.0
    relu_dom = 0.0
    act_entries = 0
    for node in g.nodes:
        if (node.op == "Einsum" and not node.attrs.get("gather")) or node.op == "Mul":
            rescale_dom = max(rescale_dom,
                              acc_ranges.get(node.id, 0.0) * RANGE_HEADROOM)
        elif node.op == "ReLU":
            relu_dom = max(relu_dom, ranges.get(node.inputs[0], 0.0) * RANGE_HEADROOM)
        elif node.op in ("Sigmoid", "Exp", "Reciprocal"):
            act_entries += 2 * int(ranges.get(node.inputs[0], 0.0)
                                   * RANGE_HEADROOM * (1 << scale)) + 1
    entries = 0
    if rescale_dom:
        entries += 2 * int(rescale_dom * (1 << (2 * scale))) + 1
    if relu_dom:
        entries += 2 * int(relu_dom * (1 << scale)) + 1
    return entries + act_entries


def calibrate(g: Graph, samples, mode: str = "accuracy", *,
              accuracy_threshold: float = ACCURACY_THRESHOLD,
              resources_threshold: float = RESOURCES_THRESHOLD,
              scale_range: tuple[int, int] = SCALE_RANGE) -> CalibrationReport:
    """Search scales for the smallest one meeting the mode's error bound.

    mode='accuracy' targets a tight bound; mode='resources' accepts a looser
    one in exchange for smaller tables and fewer bits per value.
    """
    if mode not in ("accuracy", "resources"):
        raise ValueError(f"unknown calibration mode {mode!r}")
    if not samples:
        raise CalibrationFailure("calibration needs at least one sample")
    threshold = accuracy_threshold if mode == "accuracy" else resources_threshold

    lowered = lower_to_einsum(g)

    # Observed value ranges (scale independent), from the float runs.
    ranges: dict[str, float] = {}
    ranges_min_abs: dict[str, float] = {}
    for x in samples:
        fenv = _float_env(lowered, x)
        for name, val in fenv.items():
            ranges[name] = max(ranges.get(name, 0.0), float(np.max(np.abs(val))))
            lo = float(np.min(np.abs(val)))
            ranges_min_abs[name] = min(ranges_min_abs.get(name, lo), lo)

    input_ranges = {name: ranges.get(name, 0.0) * RANGE_HEADROOM
                    for name, _ in lowered.inputs}
    bound_env = _abs_bound_env(lowered, input_ranges, ranges)

    fused = fused_bias_pairs(lowered)
    acc_ranges: dict[str, float] = {}
    acc_bounds: dict[str, float] = {}
    bias_of = {ein: bias for _, (ein, bias) in fused.items()}
    for node in lowered.nodes:
        if (node.op == "Einsum" and not node.attrs.get("gather")) or node.op == "Mul":
            observed = ranges.get(node.id, 0.0)
            bound = float(np.max(bound_env[node.id]))
            if node.id in bias_of:
                bound += float(np.max(np.abs(lowered.weights[bias_of[node.id]].data)))
            acc_ranges[node.id] = observed
            acc_bounds[node.id] = max(bound, observed * RANGE_HEADROOM)

    sweep: dict[int, float] = {}
    lo, hi = scale_range
    chosen = None
    for s in range(lo, hi + 1):
        worst = max(_sample_error(lowered, s, x) for x in samples)
        sweep[s] = worst
        if chosen is None and worst <= threshold:
            chosen = s
    if chosen is None:
        raise CalibrationFailure(
            f"no scale in [{lo}, {hi}] meets the {threshold:.2%} bound "
            f"(best {min(sweep.values()):.2%})"
        )

    # Field headroom: the worst accumulator at scale 2s must fit.
    worst_acc = max(acc_bounds.values(), default=0.0)
    if worst_acc * (1 << (2 * chosen)) >= HALF_RANGE:
        raise OverflowError("required range exceeds field headroom")

    est_entries = _estimate_table_entries(lowered, chosen, acc_ranges, ranges)
    if est_entries > MAX_TABLE_ENTRIES:
        raise CalibrationFailure(
            f"scale {chosen} needs ~{est_entries} lookup entries "
            f"(cap {MAX_TABLE_ENTRIES})"
        )

    weight_scales = {}
    for name in lowered.weights:
        weight_scales[name] = 2 * chosen if name in bias_of.values() else chosen

    per_node_scale = {}
    for node in lowered.nodes:
        if node.op == "ArgMax":
            per_node_scale[node.id] = 0
        elif node.op == "Einsum" and node.id in bias_of and not node.attrs.get("gather"):
            per_node_scale[node.id] = 2 * chosen
        else:
            per_node_scale[node.id] = chosen

    # Selection holds the observed error at the threshold; the bound handed
    # to consumers (challenge tolerances, acceptance checks) carries the same
    # headroom factor as the range estimates, since fresh inputs can exceed
    # the calibration sample's worst case.
    errs = [_sample_error(lowered, chosen, x) for x in samples]
    return CalibrationReport(
        graph_digest=graph_digest(g),
        mode=mode,
        scale=chosen,
        weight_scales=weight_scales,
        per_node_scale=per_node_scale,
        ranges=ranges,
        ranges_min_abs=ranges_min_abs,
        acc_ranges=acc_ranges,
        acc_bounds=acc_bounds,
        error_bound=RANGE_HEADROOM * threshold,
        max_rel_err=max(errs),
        mean_rel_err=float(np.mean(errs)),
        sweep=sweep,
        est_table_entries=est_entries,
        est_n_con=estimate_constraints(lowered),
        thresholds={"accuracy": accuracy_threshold, "resources": resources_threshold},
    )
