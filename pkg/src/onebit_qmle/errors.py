"""Exception hierarchy shared by every module."""


class OneBitQMLEError(Exception):
    """Base class for all package errors."""


class DomainError(OneBitQMLEError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigurationError(OneBitQMLEError, ValueError):
    """Inconsistent or invalid configuration (dimensions, intervals, ...)."""


class DataError(OneBitQMLEError):
    """Input data could not be read or does not have the expected shape."""


class CapabilityError(OneBitQMLEError):
    """The requested computation exceeds what the implementation supports."""


class NumericalError(OneBitQMLEError, ArithmeticError):
    """A numerical routine produced a non-finite or unusable value."""

    def __init__(self, message, beta=None):
        super().__init__(message)
        self.beta = beta


class SingularMatrixError(NumericalError):
    """A matrix that must be inverted is numerically singular."""

    def __init__(self, message, condition_number):
        super().__init__(message)
        self.condition_number = condition_number
