"""Exception types raised across the package."""


class DonutError(Exception):
    """Base class for all package errors."""


class DimensionError(DonutError, ValueError):
    """Operand shapes do not agree."""


class NumericError(DonutError, FloatingPointError):
    """A computation produced NaN/Inf or hit a singular system."""


class TapeStateError(DonutError, RuntimeError):
    """A tape was used out of order (e.g. backward before forward)."""


class SchemaError(DonutError, ValueError):
    """A data file is missing a declared column."""


class ValidationError(DonutError, ValueError):
    """A data value violates a dataset invariant."""


class ParseError(DonutError, ValueError):
    """A data cell could not be parsed."""


class GenerationError(DonutError, RuntimeError):
    """Synthetic data could not be generated."""


class SplitError(DonutError, ValueError):
    """A split would leave a part or a treatment arm empty."""


class PreconditionError(DonutError, ValueError):
    """An operation's input precondition does not hold."""


class TrainingError(DonutError, RuntimeError):
    """Optimization diverged."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class EstimatorError(DonutError, ArithmeticError):
    """An estimator's denominator is numerically zero."""
