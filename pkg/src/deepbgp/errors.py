"""Exception hierarchy shared across the toolkit.

Every error that callers are expected to branch on maps onto one of four
families, mirroring the CLI exit codes: configuration (2), data (3),
numeric (4) and I/O (5, plain OSError).
"""


class DeepBgpError(Exception):
    """Base class for all toolkit errors."""


class ConfigurationError(DeepBgpError):
    """A config field is missing, unknown, or fails validation."""


class DataError(DeepBgpError):
    """Base class for errors caused by bad or degenerate data."""


class ParseError(DataError):
    """A serialized file could not be parsed; carries the line number."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(DataError):
    """A record violates a structural invariant; carries the patient id."""

    def __init__(self, message: str, patient_id: str | None = None):
        if patient_id is not None:
            message = f"patient {patient_id}: {message}"
        super().__init__(message)
        self.patient_id = patient_id


class UndefinedMetricError(DataError):
    """A metric is undefined on the given inputs (e.g. one class only)."""


class DimensionError(DeepBgpError):
    """Tensor shapes do not conform."""


class NumericError(DeepBgpError):
    """A numerical operation failed beyond recovery (jitter exhausted,
    non-finite objective, non-positive predictive variance)."""


class ExtrapolationError(DeepBgpError):
    """An input lies outside the inducing grid hull; the grid must be
    rebuilt before it can be interpolated."""
