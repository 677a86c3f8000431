"""Exception types shared across the package."""


class VaellsError(Exception):
    """Base class for all package errors."""


class DimensionError(VaellsError, ValueError):
    """Array shapes do not agree with what an operation requires."""


class NumericInputError(VaellsError, ValueError):
    """An input array holds NaN or infinite entries."""


class DomainError(VaellsError, ValueError):
    """An argument lies outside the domain of a mapping."""


class NumericFailure(VaellsError, ArithmeticError):
    """A computation produced a non-finite value mid-flight."""


class ConfigurationError(VaellsError, ValueError):
    """Invalid or inconsistent configuration, checkpoint or dataset."""
