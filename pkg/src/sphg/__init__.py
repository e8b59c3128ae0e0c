"""Select-and-prune hourglass network for parking-slot corner and line detection."""

from .errors import (BadMagicError, CheckpointError, ConfigError, ContractError, DatasetParseError,
                     MissingInputError, NumericError, ShapeTableError, SPHGError,
                     TruncatedCheckpointError, VersionMismatchError)

__version__ = "0.1.0"
