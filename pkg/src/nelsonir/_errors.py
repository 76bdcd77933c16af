class NelsonIRError(Exception):
    """Base class for package errors."""


class DomainError(NelsonIRError, ValueError):
    """An input lies outside the domain where an operation is defined."""


class ConvergenceError(NelsonIRError, RuntimeError):
    """A series, quadrature or iterative solver failed to meet its tolerance."""


class InvariantViolation(NelsonIRError, RuntimeError):
    """A structural invariant failed at run time (maps to CLI exit status 2)."""


class AssumptionRefused(NelsonIRError, ValueError):
    """The requested operation needs a hypothesis the inputs do not satisfy."""
