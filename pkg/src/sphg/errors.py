"""Exception hierarchy shared across the package.

The CLI maps each class to an exit code, so keep new errors under one of
these roots.
"""


class SPHGError(Exception):
    """Base class for all package errors."""


class ConfigError(SPHGError, ValueError):
    """Bad configuration, shape mismatch or otherwise invalid setup."""


class MissingInputError(SPHGError, FileNotFoundError):
    """A required file or pipeline stage output does not exist."""


class NumericError(SPHGError, FloatingPointError):
    """NaN or Inf produced during a forward or backward pass."""


class ContractError(SPHGError, RuntimeError):
    """An operation was called in a state that its contract forbids."""


class DatasetParseError(SPHGError, ValueError):
    """A label or image file is corrupt; carries the byte offset."""

    def __init__(self, path, offset, message):
        self.path = str(path)
        self.offset = int(offset)
        super().__init__(f"{path}: byte {offset}: {message}")


class CheckpointError(SPHGError, ValueError):
    """Base class for checkpoint decoding failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class ShapeTableError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
