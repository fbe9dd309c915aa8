"""Exception hierarchy shared by every module of the package."""


class NoduleMTLError(Exception):
    """Base class for all package errors."""


class ShapeError(NoduleMTLError, ValueError):
    pass


class ConfigError(NoduleMTLError, ValueError):
    pass


class DataError(NoduleMTLError, ValueError):
    pass


class UsageError(NoduleMTLError, RuntimeError):
    pass


class NumericError(NoduleMTLError, FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


class FormatError(NoduleMTLError, ValueError):
    """Malformed or mismatched on-disk artifact (weights, volumes, manifests)."""


class UndefinedMetricError(NoduleMTLError, ValueError):
    """A metric was requested on data where it has no definition."""
