"""Exception types shared across the package."""


class PlnetError(Exception):
    """Base class for every error raised by this package."""


class ConstructionError(PlnetError):
    """Invalid architecture: incompatible shapes or parameters at build time."""


class NumericError(PlnetError):
    """Non-finite values fed to or produced by a numeric routine."""


class ConfigError(PlnetError):
    """Malformed configuration file or inconsistent settings."""


class DataError(PlnetError):
    """Problem reading a dataset."""


class BadMagicError(DataError):
    """File header does not carry the expected magic number."""


class TruncatedFileError(DataError):
    """File ends before the payload promised by its header."""


class CountMismatchError(DataError):
    """Image and label files disagree on the number of records."""
