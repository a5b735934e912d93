"""Shared exception types.

The CLI maps these onto exit codes: usage errors exit 1, `ValidationError`
exits 2, `NumericalError` exits 3.
"""


class FualaError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(FualaError, ValueError):
    """Invalid data, configuration, or file contents."""


class SingleClassError(ValidationError):
    """A ranking metric was asked to score a set with only one class."""


class NumericalError(FualaError, ArithmeticError):
    """A computation produced non-finite values."""


class TransportError(FualaError):
    """Misuse of the simulated message transport."""
