"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, `DataError`
exits 2, `NumericalError` exits 3.
"""


class S4CError(Exception):
    """Base class for package errors."""


class DataError(S4CError):
    """Malformed, missing, or inconsistent input data."""


class NumericalError(S4CError):
    """Non-finite values or other numerical failures during computation."""
