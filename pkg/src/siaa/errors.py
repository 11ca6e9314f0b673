"""Exception types raised across the package."""


class SIAAError(Exception):
    """Base class for all package errors."""


class DegenerateInputError(SIAAError, ValueError):
    """Input is numerically degenerate (e.g. a zero-norm vector)."""


class NonFiniteError(SIAAError, ArithmeticError):
    """A gradient or objective value became NaN or infinite."""


class UndefinedMetricError(SIAAError, ValueError):
    """A metric is undefined for the given inputs (e.g. ASR with no pre-correct images)."""


class DatasetError(SIAAError, ValueError):
    """Dataset layout or content does not satisfy a precondition."""
