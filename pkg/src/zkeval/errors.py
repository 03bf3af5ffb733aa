"""Exception taxonomy shared across the toolkit.

Builtin ``OverflowError`` is reused for fixed-point range violations; everything
else derives from :class:`ZkevalError` so callers can catch toolkit failures
in one clause.
"""


class ZkevalError(Exception):
    """Base class for all toolkit-specific errors."""


class SchemaError(ZkevalError):
    """A document does not match the expected file schema."""


class ShapeError(ZkevalError):
    """Tensor shapes do not compose under an operation's shape rule."""


class CycleError(ZkevalError):
    """A node references a value that is not produced earlier in the graph."""


class UnsupportedOpError(ZkevalError):
    """An operation has no lowering (or no conversion) in this toolkit."""


class CalibrationFailure(ZkevalError):
    """No scale in the search range meets the requested error bound."""


class DomainError(ZkevalError):
    """A value fell outside the domain of a lookup table (mis-calibration)."""


class LengthMismatch(ZkevalError):
    """Paired vectors passed to an argument builder differ in length."""


class WitnessMismatch(ZkevalError):
    """A witness was generated against a different circuit than the key."""


class UnsatisfiedWitness(ZkevalError):
    """Refusing to prove: the witness trace violates the constraint system."""


class HashMismatch(ZkevalError):
    """Weight digests disagree where they are required to be identical."""


class InvalidProof(ZkevalError):
    """A proof failed verification where a valid proof is a precondition."""


class MetricUnsupported(ZkevalError):
    """The requested aggregate metric has no circuit construction."""


class ChallengeFailure(ZkevalError):
    """The prover cannot reproduce the challenged output within tolerance."""


class InsufficientData(ZkevalError):
    """Not enough measurement points to fit cost coefficients."""
