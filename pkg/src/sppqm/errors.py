"""Exception hierarchy shared by all modules."""


class SppqmError(Exception):
    """Base class for every error raised by this package."""


class DomainError(SppqmError, ValueError):
    """An argument lies outside the domain where a formula is defined."""


class NoSolutionError(SppqmError, ValueError):
    """A root finder could not bracket a solution."""


class SingularityError(SppqmError, ArithmeticError):
    """Evaluation hit a pole or branch point of the model."""


class NoBoundModeError(SppqmError, ValueError):
    """The interface does not support a bound, forward-propagating TM mode."""


class ConfigurationError(SppqmError, ValueError):
    """Inputs are inconsistent or a required quantity is missing."""


class NumericError(SppqmError, RuntimeError):
    """A numerical procedure failed to reach the requested accuracy."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UnsupportedUnitError(SppqmError, ValueError):
    """The requested unit conversion pair is not available."""
