"""Exception types raised across the package."""


class AecfxError(Exception):
    """Base class for all package errors."""


class ConfigurationError(AecfxError, ValueError):
    """A layer chain, run config or schema is inconsistent."""


class UsageError(AecfxError, ValueError):
    """An API was called with arguments that violate its contract."""


class NonFiniteError(AecfxError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class DataError(AecfxError, ValueError):
    """Input data could not be parsed or is inconsistent."""


class ModelFormatError(AecfxError):
    """A serialized model file is unreadable."""


class ChecksumError(ModelFormatError):
    """Stored checksum does not match the file contents."""


class FormatVersionError(ModelFormatError):
    """File was written with a format version this reader cannot load."""
