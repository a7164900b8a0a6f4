"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes (config=2, data=3, numeric=4),
so raise the most specific class that applies.
"""


class VirtstainError(Exception):
    """Base class for all package errors."""


class ConfigError(VirtstainError):
    """Invalid or inconsistent configuration."""


class DataError(VirtstainError):
    """Missing, malformed, or mismatched input data."""


class CheckpointError(DataError):
    """Unreadable, truncated, or version-incompatible checkpoint."""


class NumericError(VirtstainError):
    """Non-finite values or numerically undefined quantities."""


class ConstantInputError(NumericError):
    """Correlation requested on a constant sequence (undefined)."""
