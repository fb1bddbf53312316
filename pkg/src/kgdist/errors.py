"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: usage errors exit 1, data/validation
errors exit 2, numeric failures exit 3.
"""


class KGError(Exception):
    """Base class for all toolkit errors."""


class ParseError(KGError):
    """Malformed input file (bad column count, non-numeric token, ...)."""


class ReferenceError_(KGError):
    """An id is out of range of the supplied dictionaries."""


class ShapeError(KGError):
    """Array or matrix dimensions do not match what the graph requires."""


class ValidationError(KGError):
    """Parameter or configuration outside its legal range."""


class FormatError(KGError):
    """A partition directory or checkpoint is missing pieces or corrupt."""


class ProvenanceError(KGError):
    """Stored metadata does not match the data it claims to describe."""


class SamplingError(KGError):
    """Negative sampling exhausted its candidate pool for an edge."""


class IntegrityError(KGError):
    """Internal cross-reference failure (missing vertex, missing embedding)."""


class NumericError(KGError):
    """A non-finite value appeared where a finite one is required."""


class ProtocolError(KGError):
    """Gradient payloads disagree in shape across workers."""
