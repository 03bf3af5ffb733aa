"""zkeval: verifiable evaluation attestations for quantized model inference.

Pipeline: load a graph, calibrate fixed-point scales, lower to a constraint
system, generate witnesses, prove/verify against a weight commitment, then
package proofs into publishable attestations or answer post-hoc challenges.
"""

from .calibration import CalibrationReport, calibrate, simulate_quantized
from .circuit import (
    Argument,
    ConstraintSystem,
    LookupTable,
    check_satisfied,
    cumulative_dot_product,
    cumulative_product,
    cumulative_sum,
    elementwise,
    load_circuit,
    lookup_apply,
    lower_graph,
    max_argument,
    min_argument,
    padded_row_count,
    save_circuit,
)
from .field import FieldElement, FixedPointCodec, decode, encode, rescale
from .graph import (
    Graph,
    Node,
    Tensor,
    count_macs,
    count_ops,
    graph_to_document,
    infer_float,
    load_graph,
    lower_to_einsum,
    save_graph,
)
from .prover import Proof, ProvingKey, VerificationKey, prove, setup, verify
from .witness import Witness, hash_weights, make_witness, run_quantized
from .attestation import (
    BundleEntry,
    MetricAttestation,
    NaiveBundle,
    build_bundle,
    build_metric_attestation,
    load_bundle,
    save_bundle,
    verify_bundle,
    verify_metric_attestation,
)
from .challenge import (
    AuditPolicy,
    ChallengeRequest,
    ChallengeResponse,
    adjudicate,
    detection_probability,
    expected_cost_balance,
    respond,
    schedule_audits,
)
from .costmodel import CostCoefficients, CostEstimate, estimate, fit, report_table

__version__ = "0.1.0"
