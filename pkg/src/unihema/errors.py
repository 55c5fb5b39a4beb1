"""Exception types shared across the package.

Each class maps to one CLI exit code family: usage errors exit 2,
data/format errors exit 3, stage-ordering errors exit 4.
"""


class UniHemaError(Exception):
    """Base class for all package errors."""


class DimensionError(UniHemaError):
    """Tensor extents do not line up for the requested operation."""


class ConfigurationError(UniHemaError):
    """A configuration value is inconsistent or out of range."""


class UsageError(UniHemaError):
    """An operation was invoked in an unsupported way."""


class DataFormatError(UniHemaError):
    """A file or record does not match its declared format."""


class StageOrderError(UniHemaError):
    """A training stage was started without its prerequisite checkpoint."""


class LexicalError(UniHemaError):
    """Text contains a token outside the closed vocabulary."""
