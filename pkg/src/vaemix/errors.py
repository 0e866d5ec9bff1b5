"""Exception types shared across the package."""


class VaemixError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(VaemixError, ValueError):
    """Operand shapes do not conform; the message names both shapes."""


class NumericsError(VaemixError, ArithmeticError):
    """A NaN/Inf reached a public output or a training step diverged."""


class ConfigError(VaemixError, ValueError):
    """Invalid configuration value or malformed config file."""


class DataError(VaemixError, ValueError):
    """Dataset ingestion or validation failure."""


class IdxError(DataError):
    """Base class for IDX-file parsing failures."""


class IdxMagicError(IdxError):
    """File starts with the wrong magic number."""


class IdxTruncatedError(IdxError):
    """File ends before the payload its header promises."""


class IdxCountMismatchError(IdxError):
    """Image and label files disagree on the instance count."""


class CheckpointError(VaemixError, ValueError):
    """Base class for checkpoint container failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""


class CheckpointCorruptError(CheckpointError):
    """Manifest/payload mismatch or a failed per-tensor checksum."""
