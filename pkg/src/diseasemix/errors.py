"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes: usage/config problems exit 2,
data problems exit 3, numerical failures exit 4.
"""


class DiseasemixError(Exception):
    """Base class for all package-specific errors."""


class UsageError(DiseasemixError):
    """Bad flags, bad config values, missing required options."""

    exit_code = 2


class DataError(DiseasemixError):
    """Malformed or inconsistent input data (file, schema, referential)."""

    exit_code = 3


class NumericalError(DiseasemixError):
    """A numerical routine failed in a way that invalidates its output."""

    exit_code = 4
