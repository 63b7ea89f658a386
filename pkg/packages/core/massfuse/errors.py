"""Exception hierarchy for massfuse.

Input and validation problems also derive from ValueError, numerical failures
from RuntimeError, so callers can catch either the specific class or the builtin.
"""

from __future__ import annotations


class MassfuseError(Exception):
    """Base class for every error raised by massfuse."""


class SchemaError(MassfuseError, ValueError):
    """A CSV header or frame layout does not match the declared schema."""


class ParseError(MassfuseError, ValueError):
    def __init__(self, row: int, column: str, value: str = ""):
        self.row = row
        self.column = column
        self.value = value
        super().__init__(f"Cannot parse {value!r} as a number (row {row}, column {column!r})")


class EmptyFrameError(MassfuseError, ValueError):
    """A frame with no data rows was read or passed to an estimator."""


class DesignError(MassfuseError, ValueError):
    """Sampling design sizes are inconsistent or the design cannot be drawn."""


class ModelError(MassfuseError, ValueError):
    """A selection model emitted an invalid inclusion probability."""


class ConvergenceError(MassfuseError, RuntimeError):
    def __init__(self, message: str, last_value: float | None = None):
        self.last_value = last_value
        super().__init__(message)


class DonorPoolError(MassfuseError, ValueError):
    """More donors were requested than Sample B holds."""


class DimensionError(MassfuseError, ValueError):
    """Covariate dimensions of two inputs disagree."""


class BasisError(MassfuseError, ValueError):
    """A spline basis cannot be built from the supplied column."""


class RankError(MassfuseError, RuntimeError):
    """A normal-equation or Gram matrix is numerically singular."""


class CollinearConstraintError(RankError):
    def __init__(self, component: str, message: str = ""):
        self.component = component
        super().__init__(message or f"Calibration constraint {component!r} is collinear with earlier constraints")


class VarianceUndefinedError(MassfuseError, RuntimeError):
    """The variance estimator is undefined for this sample (e.g. one unit in a stratum)."""


class RatioUndefinedError(MassfuseError, RuntimeError):
    """The denominator of a ratio estimator is not positive."""


class ExtremeWeightError(MassfuseError, RuntimeError):
    """An estimated propensity is too small to weight by."""


class ConfigError(MassfuseError, ValueError):
    """A simulation or CLI configuration is invalid."""
