"""Error types raised across the model stack.

Every error the CLI knows how to report derives from ``ModelError``; the
concrete classes also subclass the closest builtin so callers that only
catch ``ValueError`` or ``IndexError`` keep working.
"""


class ModelError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(ModelError, ValueError):
    """A configuration invariant is violated."""


class DimensionError(ModelError, ValueError):
    """Tensor shapes or axes do not line up."""


class SelectionError(ModelError, ValueError):
    """Top-k selection is infeasible (k larger than the candidate count)."""


class LabelError(ModelError, ValueError):
    """A class label or smoothing factor is out of range."""


class BucketingError(ModelError, ValueError):
    """Too few boxes to compute scale quartiles."""


class VersionError(ModelError, ValueError):
    """A checkpoint or dump does not match the expected version or config."""


class DatasetError(ModelError, OSError):
    """A dataset container could not be written or read."""


class OracleError(ModelError, ArithmeticError):
    """A verification oracle evaluated to a non-finite value."""


class NonFiniteError(ModelError, FloatingPointError):
    """A primitive produced NaN or Inf."""


class TensorIndexError(ModelError, IndexError):
    """A row or query index is out of range."""
