"""Exception hierarchy and process exit codes.

Every failure mode named by an operation contract gets its own class so
callers (and tests) can distinguish them without string matching.
"""


class KcurateError(Exception):
    """Base class for all kcurate errors."""

    exit_code = 1


class ConfigError(KcurateError):
    """Invalid configuration or parameter value."""

    exit_code = 2


class MissingArtifactError(KcurateError):
    """A required input file or pipeline artifact does not exist."""

    exit_code = 3


class NumericError(KcurateError):
    """A numeric computation produced non-finite or inconsistent results."""

    exit_code = 4


class VolumeMissingError(MissingArtifactError):
    """Container file for a k-space volume does not exist."""


class DatasetMissingError(KcurateError):
    """Container exists but holds no ``kspace`` dataset."""


class RankError(KcurateError):
    """Stored or supplied array has the wrong number of dimensions."""


class NonFiniteError(NumericError):
    """Array contains NaN or Inf entries."""


class ShapeMismatchError(KcurateError):
    """Array shapes of related inputs disagree."""


class DuplicateKeyError(KcurateError):
    """Duplicate (volume_id, slice_index) or volume_id in a manifest."""


class FormatError(KcurateError):
    """Malformed embedding or manifest file (bad magic, truncation, ...)."""


class ModelMismatchError(KcurateError):
    """Embedding sets produced by different models were combined."""


class DegenerateInputError(NumericError):
    """Input carries no usable signal (all-zero volume, zero variance)."""


class DegenerateMaskError(NumericError):
    """Foreground mask is empty; masked metrics are undefined."""
