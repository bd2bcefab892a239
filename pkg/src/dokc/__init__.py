"""Distributed-order fractional ODE/PDE solvers via exponential-sum kernel compression."""

__version__ = "0.1.0"

from .errors import (
    AccuracyError,
    ConditioningError,
    ConfigError,
    DokcError,
    DomainError,
    NumericalError,
    StepFailure,
    ValidationError,
)

__all__ = [
    "__version__",
    "AccuracyError",
    "ConditioningError",
    "ConfigError",
    "DokcError",
    "DomainError",
    "NumericalError",
    "StepFailure",
    "ValidationError",
]
