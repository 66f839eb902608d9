"""Exception types shared across the package."""


class TrapLabError(Exception):
    """Base class for all package errors."""


class ConfigError(TrapLabError, ValueError):
    """Invalid configuration or argument value."""


class PreconditionError(TrapLabError, ValueError):
    """An input violates an operation's precondition (e.g. a degenerate box)."""


class DimensionError(TrapLabError, ValueError):
    """Tensor shapes do not line up."""


class CapacityError(TrapLabError, ValueError):
    """More targets than detector queries."""


class NumericalError(TrapLabError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(TrapLabError, ValueError):
    """A file does not follow the expected layout."""


class UndefinedRateError(TrapLabError, ZeroDivisionError):
    """A rate has an empty denominator."""


class DependencyError(TrapLabError, RuntimeError):
    """An upstream pipeline artifact is missing."""
