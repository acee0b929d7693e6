"""Exception types raised across the package."""


class MoeRefineError(Exception):
    """Base class for package errors."""


class DimensionMismatchError(MoeRefineError, ValueError):
    """Operand shapes are incompatible."""


class FingerprintMismatchError(MoeRefineError):
    """Refined queries and index come from different checkpoints or modes."""


class FileFormatError(MoeRefineError, ValueError):
    """A file does not conform to its documented layout."""


class BadHeaderError(FileFormatError):
    """Unknown magic bytes or unsupported format version."""


class TruncatedFileError(FileFormatError):
    """File ends before the payload announced by its header."""


class IdCountMismatchError(FileFormatError):
    """Identifier sidecar disagrees with the header row count."""


class ConfigError(MoeRefineError, ValueError):
    """Invalid configuration file or option value."""
