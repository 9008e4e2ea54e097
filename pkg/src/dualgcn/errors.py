"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""


class DataError(ValueError):
    """A dataset file is missing, malformed, or inconsistent."""


class NumericError(RuntimeError):
    """Training produced a non-finite loss or otherwise diverged."""
