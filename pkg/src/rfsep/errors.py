"""Exception types raised across the package."""


class ParameterError(ValueError):
    """An argument lies outside its supported set or range."""


class DimensionError(ValueError):
    """Array or tensor shapes are incompatible with the operation."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class UndefinedReferenceError(ValueError):
    """A reference signal has zero energy, so a ratio metric is undefined."""


class CheckpointError(IOError):
    """A checkpoint file is missing, truncated, or has a malformed header."""
