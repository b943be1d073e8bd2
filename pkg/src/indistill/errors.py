"""Exception types shared across the package.

The CLI maps these onto exit codes: configuration problems exit with 2,
data/file problems with 3, and non-finite numerics with 4.
"""


class IndistillError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(IndistillError, ValueError):
    """Array shapes are incompatible; the message names the offending axis."""


class ParameterError(IndistillError, ValueError):
    """A scalar argument is outside its valid range (e.g. temperature <= 0)."""


class ConfigurationError(IndistillError, ValueError):
    """An experiment configuration is invalid and no compute was started."""


class ScheduleError(ConfigurationError):
    """A curriculum schedule is infeasible for the given epoch budget."""

    def __init__(self, message: str, min_epochs: int | None = None):
        super().__init__(message)
        self.min_epochs = min_epochs


class AlignmentError(IndistillError, ValueError):
    """Teacher/student feature maps do not align; usually a bad pruning rate."""


class TapeError(IndistillError, RuntimeError):
    """Gradient tape misuse (non-scalar loss, double backward, stale tape)."""


class DataError(IndistillError, ValueError):
    """A dataset file is missing, malformed, or inconsistent."""


class CheckpointError(IndistillError, ValueError):
    """A checkpoint file failed its integrity or version check."""


class NumericError(IndistillError, ArithmeticError):
    """Training produced a non-finite loss."""
