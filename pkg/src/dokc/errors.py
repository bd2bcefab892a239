"""Exception hierarchy shared by all modules."""


class DokcError(Exception):
    """Base class for library errors."""


class ConfigError(DokcError, ValueError):
    """Invalid configuration, unknown name or missing input."""


class DomainError(DokcError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class NumericalError(DokcError, ArithmeticError):
    """An iterative method failed to converge.

    ``diagnostics`` carries whatever the failing routine could report
    (iteration counts, residual histories, ...).
    """

    def __init__(self, message, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class AccuracyError(NumericalError):
    """A requested tolerance could not be met; ``estimate`` holds the best result."""

    def __init__(self, message, estimate=None, error=None, **diagnostics):
        super().__init__(message, **diagnostics)
        self.estimate = estimate
        self.error = error


class ValidationError(DokcError, ValueError):
    """A computed object violates a required invariant."""

    def __init__(self, message, offenders=()):
        super().__init__(message)
        self.offenders = list(offenders)


class ConditioningError(ValidationError):
    """Near-multiple poles make a partial fraction decomposition unreliable."""


class StepFailure(NumericalError):
    """A time step could not be completed."""
