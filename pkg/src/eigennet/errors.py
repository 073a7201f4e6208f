"""Exception types shared across the package."""


class EigenNetError(Exception):
    """Base class for all package errors."""


class DimensionError(EigenNetError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class RankError(EigenNetError, ValueError):
    """Tensor rank is wrong for the requested operation."""


class LabelError(EigenNetError, ValueError):
    """A class label is outside the valid range."""


class GeometryError(EigenNetError, ValueError):
    """Convolution geometry does not produce integral output extents."""


class FactorShapeError(EigenNetError, ValueError):
    """A factor matrix is wider than it is tall (not a thin factor)."""


class OptimizerError(EigenNetError, RuntimeError):
    """Optimizer invariants violated, e.g. a parameter without a gradient."""


class ConfigError(EigenNetError, ValueError):
    """Invalid run configuration (maps to CLI exit code 2)."""


class FormatError(EigenNetError, ValueError):
    """A dataset file does not match its declared binary format."""


class LengthError(EigenNetError, ValueError):
    """A dataset file payload is truncated or empty."""


class EvaluationError(EigenNetError, ValueError):
    """Evaluation requested on an empty dataset."""


class DivergenceError(EigenNetError, RuntimeError):
    """Training hit a non-finite loss (maps to CLI exit code 3)."""

    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = records or []
