"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: usage problems exit 1, data and
validation problems exit 2, internal invariant violations exit 3.
"""


class SpikecastError(Exception):
    """Base class for all toolkit errors."""


class UsageError(SpikecastError):
    """Bad command line or invalid flag combination."""


class DataError(SpikecastError):
    """Invalid model, dataset, or configuration content."""


class ModelFormatError(DataError):
    """Container on disk violates the manifest/blob contract."""


class ShapeChainError(DataError):
    """Consecutive layer shapes do not chain."""


class InvariantError(SpikecastError):
    """An internal consistency check failed; indicates a bug."""
