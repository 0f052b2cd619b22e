"""Exception hierarchy for the extrapinn package.

Every error carries the process exit code the CLI reports for it. Errors with
diagnostic fields rebuild from their constructor arguments when pickled, so
they cross the process-pool boundary intact.
"""

from typing import Any, Optional


class ExtrapinnError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(ExtrapinnError):
    """Invalid configuration, missing input file or unreadable artifact."""

    exit_code = 1


class NumericalError(ExtrapinnError):
    """A numerical computation produced unusable values."""

    exit_code = 2


class EvaluationError(NumericalError):
    """Non-finite value met while evaluating the network or a residual."""

    def __init__(self, message: str, layer: Optional[str] = None, point: Any = None, term: Optional[str] = None):
        details = []
        if layer is not None:
            details.append(f"layer={layer}")
        if point is not None:
            details.append(f"point={point}")
        if term is not None:
            details.append(f"term={term}")
        super().__init__(f"{message} ({', '.join(details)})" if details else message)
        self.message = message
        self.layer = layer
        self.point = point
        self.term = term

    def __reduce__(self):
        return type(self), (self.message, self.layer, self.point, self.term)


class GradientError(NumericalError):
    """The loss handed to the gradient engine was not finite."""

    def __init__(self, message: str, loss_value: float = float("nan")):
        super().__init__(f"{message} (loss={loss_value})")
        self.message = message
        self.loss_value = loss_value

    def __reduce__(self):
        return type(self), (self.message, self.loss_value)


class DivergenceError(NumericalError):
    """Training loss became non-finite; the partial trace is attached."""

    def __init__(self, message: str, trace: Any = None):
        super().__init__(message)
        self.message = message
        self.trace = trace

    def __reduce__(self):
        return type(self), (self.message, self.trace)


class SolverError(NumericalError):
    """The implicit integrator could not continue."""

    def __init__(self, message: str, time: float = float("nan")):
        super().__init__(f"{message} at t={time:.6g}")
        self.message = message
        self.time = time

    def __reduce__(self):
        return type(self), (self.message, self.time)


class InvariantViolation(ExtrapinnError):
    """A documented invariant of an operation does not hold."""

    exit_code = 3


class ContractError(InvariantViolation):
    """An operation was called with arguments violating its preconditions."""
