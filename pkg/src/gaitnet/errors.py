"""Exception hierarchy shared by every module of the package."""


class GaitNetError(Exception):
    """Base class for all package errors."""


class ShapeError(GaitNetError, ValueError):
    """Array dimensions do not match the expected layout."""


class NonFiniteError(GaitNetError, ArithmeticError):
    """A NaN or infinity showed up in weights, gradients or losses."""


class NoForwardRecordError(GaitNetError, RuntimeError):
    """backward() was called without a recorded forward pass."""


class FrozenNetworkError(GaitNetError, RuntimeError):
    """An optimizer tried to update a frozen network."""


class FormatError(GaitNetError, ValueError):
    """A binary or text file is truncated, corrupt or malformed."""


class VersionError(FormatError):
    """File format version is not supported by this build."""


class SchemaMismatchError(GaitNetError, ValueError):
    """Artifacts were produced under a different condition schema."""


class RangeError(GaitNetError, ValueError):
    """A condition value lies outside its valid range."""


class DegenerateRotationError(GaitNetError, ValueError):
    """A 6D rotation code has (near-)parallel or zero columns."""


class ConfigError(GaitNetError, ValueError):
    """Invalid or unknown configuration key/value."""
