"""Exception hierarchy shared by every module."""

from __future__ import annotations

import numpy as np


class BlitzError(Exception):
    """Base class for all package errors."""


class DimensionError(BlitzError, ValueError):
    """Operand shapes are incompatible."""


class NumericError(BlitzError, FloatingPointError):
    """A non-finite value reached a numerical routine."""


class DecompositionError(BlitzError, np.linalg.LinAlgError):
    """A matrix stayed non positive definite after the maximum jitter."""


class DegenerateGridError(BlitzError, ValueError):
    """Grid coordinates are duplicated or span a zero-width range."""


class GuardError(BlitzError, RuntimeError):
    """A dense computation was refused because it exceeds the size guard."""


class SchemaError(BlitzError, ValueError):
    """A file or document is missing required fields or columns."""


class DataError(BlitzError, ValueError):
    """Input data is empty or otherwise unusable."""


class ConfigError(BlitzError, ValueError):
    """Run configuration failed validation; ``errors`` lists every problem found."""

    def __init__(self, message: str, errors: list[str] | None = None):
        super().__init__(message)
        self.errors = list(errors) if errors else [message]


class NonFiniteGradientError(NumericError):
    """An optimizer step received a NaN or infinite gradient."""

    def __init__(self, message: str, parameter: str | None = None, iteration: int | None = None):
        super().__init__(message)
        self.parameter = parameter
        self.iteration = iteration
