"""Exception hierarchy shared by every kedrl module."""


class KedrlError(Exception):
    """Base class for all package errors."""


class InvalidInputError(KedrlError, ValueError):
    """Input violates a documented precondition (shape, sign, finiteness)."""


class DomainError(InvalidInputError):
    """A quantity is requested outside the parameter range where it exists."""


class UnsupportedStatisticError(InvalidInputError):
    """The requested statistic cannot be recovered from an RKHS embedding."""


class NumericalError(KedrlError, ArithmeticError):
    """A factorization, solve or optimization produced unusable numbers."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})
