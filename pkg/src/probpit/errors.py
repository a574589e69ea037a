"""Exception types shared across the package.

The CLI maps these onto process exit codes, so each class carries the code
it should produce.
"""


class ProbPitError(Exception):
    exit_code = 2


class ShapeError(ProbPitError, ValueError):
    """Arrays that must agree in shape do not."""


class DataError(ProbPitError, ValueError):
    """Input data is missing, malformed or contains NaN."""


class ConfigError(ProbPitError, ValueError):
    """A configuration value is inconsistent or out of range."""

    exit_code = 1


class DegenerateInputError(ProbPitError, ValueError):
    """Input is valid in form but carries no usable information (zero variance, rank deficiency)."""


class DecompositionError(DegenerateInputError):
    pass


class CheckpointVersionError(DataError):
    pass


class NumericError(ProbPitError, ArithmeticError):
    """A computation produced NaN or Inf."""

    exit_code = 3


class ContractError(ProbPitError, RuntimeError):
    """An API precondition on call ordering was violated (e.g. stale forward cache)."""
