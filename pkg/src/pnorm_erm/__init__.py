"""Empirical risk minimization for p-norm linear regression.

Loss kernel, synthetic distributions, an ERM solver, Monte Carlo
estimators for the distribution-dependent constants, closed-form excess
risk bounds, and seeded verification campaigns.
"""

from pnorm_erm.errors import (
    DomainError,
    EstimatorInconsistency,
    MaxIterations,
    MomentViolation,
    NonPositiveDefinite,
    NumericalBreakdown,
    ParseError,
    SingularityError,
)
from pnorm_erm.loss_kernel import LossKernel

__version__ = "0.1.0"

__all__ = [
    "DomainError",
    "EstimatorInconsistency",
    "LossKernel",
    "MaxIterations",
    "MomentViolation",
    "NonPositiveDefinite",
    "NumericalBreakdown",
    "ParseError",
    "SingularityError",
]
