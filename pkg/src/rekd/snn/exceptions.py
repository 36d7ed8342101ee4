"""This module contains the exception types raised by the rekd-snn package."""

from typing import Optional


class ReKDError(Exception):
    """Base class for all errors raised by rekd-snn."""


class DimensionError(ReKDError, ValueError):
    """Raised when tensor shapes do not line up."""


class ParameterError(ReKDError, ValueError):
    """Raised for out of range scalar parameters (temperatures, ratios, ...)."""


class RangeError(ParameterError):
    """Raised when input values are outside of their admissible range."""


class LabelIndexError(ReKDError, IndexError):
    """Raised when a class index is outside of `[0, C)`."""


class NumericError(ReKDError, ArithmeticError):
    """Raised when a NaN or infinite value is detected."""


class DivergenceError(NumericError):
    """Raised when a KL divergence would be infinite."""


class StateError(ReKDError, RuntimeError):
    """Raised when an operation is called on state that is not ready for it."""


class ConfigurationError(ReKDError):
    """Raised for inconsistent experiment or distillation setups."""


class DatasetValidationError(ReKDError):
    """Raised when a dataset violates its own manifest."""


class FormatError(ReKDError):
    """Raised for malformed dataset, checkpoint or event files.

    Args:
        message: The error description
        offset: The byte offset (or line number for text formats) of the problem
    """

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
