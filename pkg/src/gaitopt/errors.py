"""Exception types shared across the package."""


class GaitoptError(Exception):
    """Base class for all package-specific errors."""


class SolverFailure(GaitoptError):
    """A numerical routine failed to converge for reasons other than
    infeasibility (e.g. iteration cap hit on a problem believed feasible)."""


class DegenerateError(GaitoptError):
    """Strict complementarity fails at the QP solution, so the sensitivity
    system is not differentiable there."""

    def __init__(self, indices, message=None):
        self.indices = list(indices)
        super().__init__(message or f"strict complementarity fails on rows {self.indices}")


class SingularKktError(GaitoptError):
    """The sensitivity KKT matrix could not be factored."""


class LpInfeasibleError(GaitoptError):
    """The linear program has an empty feasible set."""


class LpUnboundedError(GaitoptError):
    """The linear program is unbounded below (caller likely forgot
    trust-region rows)."""


class NonpositiveDurationError(GaitoptError):
    """A spline segment was given a duration <= 0."""


class OutOfHorizonError(GaitoptError):
    """Evaluation time falls outside the trajectory's time span."""


class PolytopeViolationError(GaitoptError):
    """A schedule update left the contact-time polytope."""


class BarrierDomainError(GaitoptError):
    """Log-barrier evaluated at a point with a non-positive constraint slack."""


class DimensionMismatchError(GaitoptError):
    """Inconsistent array dimensions passed to a builder."""


class ScenarioInvalidError(GaitoptError):
    """Scenario file failed validation."""
