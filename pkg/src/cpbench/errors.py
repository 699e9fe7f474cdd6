"""Exception types shared across the package."""


class CpBenchError(Exception):
    """Base class for all package errors."""


class ConfigError(CpBenchError):
    """Invalid configuration or argument values."""


class DegenerateVarianceError(CpBenchError):
    """Variance estimate at or below the numerical floor (constant data)."""


class TrainingInvalidError(CpBenchError):
    """Training window rejected by the offline change-point pre-test.

    Carries the offline test's change-point estimate (1-based index into
    the rejected window).
    """

    def __init__(self, cp_index: int):
        super().__init__(f"training window contains a change point near index {cp_index}")
        self.cp_index = cp_index


class WindowExhaustedError(CpBenchError):
    """Monitoring window is exhausted; the caller must re-train."""


class EstimationError(CpBenchError):
    """Model estimation failed to converge."""


class DecodeError(CpBenchError):
    """Wire message could not be decoded. Carries the offending raw line."""

    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class AccountingError(CpBenchError):
    """Timestamps required for a delay metric are missing from the log."""
