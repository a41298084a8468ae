"""Exception taxonomy shared across the package."""


class DraftLabError(Exception):
    """Base class for all package errors."""


class DimensionError(DraftLabError, ValueError):
    """Tensor shapes do not line up for the requested operation."""


class DomainError(DraftLabError, ValueError):
    """Input is outside an operation's mathematical domain."""


class EvaluationError(DraftLabError, ArithmeticError):
    """A function produced a non-finite value where a finite one is required."""


class ConfigError(DraftLabError, ValueError):
    """Invalid or inconsistent configuration."""


class TrainingError(DraftLabError, RuntimeError):
    """Training diverged or otherwise failed; carries the failing step index."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class ContextLengthError(DraftLabError, ValueError):
    """Sequence exceeds the model's maximum positions under full attention."""


class InsufficientDataError(DraftLabError, ValueError):
    """Not enough samples to compute the requested statistic."""


class AlignmentError(DraftLabError, ValueError):
    """Traces or records cannot be brought into a common coordinate frame."""


class InvariantViolationError(DraftLabError, RuntimeError):
    """An internal protocol invariant was broken (indicates a caller bug)."""


class CheckpointError(DraftLabError, IOError):
    """Checkpoint file is missing, truncated, or has the wrong format."""


class UsageError(DraftLabError, ValueError):
    """Bad command-line usage (unknown preset, missing argument)."""
