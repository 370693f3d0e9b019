"""Exception hierarchy shared by every module."""


class PNormError(Exception):
    """Base class for all package errors."""


class DomainError(PNormError, ValueError):
    """An argument lies outside the domain of the operation."""


class SingularityError(DomainError):
    """The second derivative of the loss is unbounded at the requested point."""


class MomentViolation(PNormError):
    """A moment required by the computation does not exist for the distribution."""


class NonPositiveDefinite(PNormError):
    """A matrix expected to be positive definite is singular or ill-conditioned."""


class NumericalBreakdown(PNormError):
    """A non-finite value appeared during an iterative computation."""


class MaxIterations(PNormError):
    """The solver ran out of iterations. ``best`` holds the best iterate found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class EstimatorInconsistency(PNormError):
    """A Monte Carlo estimate contradicts a sign constraint beyond its error bars."""


class ParseError(PNormError, ValueError):
    """Malformed input file or configuration."""
