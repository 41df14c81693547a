"""Exception hierarchy shared by every module."""


class StiefError(Exception):
    """Base class for all package errors."""


class DimensionError(StiefError, ValueError):
    """Shapes or ranks are incompatible with the requested operation."""


class DegenerateInputError(StiefError, ValueError):
    """Input is empty, all-zero, or otherwise carries no usable signal."""


class RankDeficiencyError(StiefError, ArithmeticError):
    """A factorization met a numerically singular pivot."""


class ConvergenceError(StiefError, ArithmeticError):
    """An iterative routine hit its iteration cap."""


class ContractError(StiefError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(StiefError, ValueError):
    """Invalid configuration values."""


class TrainingDivergedError(StiefError, ArithmeticError):
    def __init__(self, step: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at optimizer step {step}")
        self.step = step


class AllocationError(StiefError, ValueError):
    """Rank allocation could not be produced from the given surfaces."""


class DiagnosticsError(StiefError, ValueError):
    pass


class FormatError(StiefError, ValueError):
    """A persisted artifact is malformed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class StaleArtifactError(StiefError, ValueError):
    """Artifact fingerprint does not match the active configuration."""
