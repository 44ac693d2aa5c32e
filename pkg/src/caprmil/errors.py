"""Exception types shared across the package.

The CLI maps each class to its own exit code and a machine-parseable prefix.
"""

from .numerics.ops import ConfigError
from .numerics.tensor import DimensionError


class DataError(ValueError):
    """Malformed or inconsistent input data (labels, shapes, non-finite values)."""


class FormatError(DataError):
    """A binary file does not follow the expected layout."""


class CorruptionError(FormatError):
    """A binary file ends before its header says it should."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UndefinedMetricError(ValueError):
    """A metric is mathematically undefined for the given inputs."""


__all__ = [
    "ConfigError",
    "CorruptionError",
    "DataError",
    "DimensionError",
    "FormatError",
    "UndefinedMetricError",
]
