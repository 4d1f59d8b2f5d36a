"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError -> 3,
NumericalError -> 4.
"""


class LataError(Exception):
    """Base class for package-specific failures."""


class ConfigError(LataError):
    """A run configuration field is missing, malformed, or out of range."""


class DataError(LataError):
    """A data file or dataset is unreadable or inconsistent."""


class NumericalError(LataError):
    """A numerical failure occurred mid-computation (NaN, overflow)."""
