"""Exception types shared across the package."""


class HadamardFlowError(Exception):
    """Base class for all package errors."""


class OutOfChart(HadamardFlowError):
    """A point (or an integration trajectory) left the chart bounds."""


class NoConvergence(HadamardFlowError):
    """The shooting Newton iteration for a boundary-value geodesic failed.

    Usually signals a point pair outside the effective convex patch.
    """

    def __init__(self, message, iterations=None, defect=None):
        super().__init__(message)
        self.iterations = iterations
        self.defect = defect


class DegenerateStencil(HadamardFlowError):
    """A finite-difference stencil left the valid evaluation domain."""


class SingularJacobian(HadamardFlowError):
    """The exponential-map Jacobian is numerically singular (near caustics)."""


class NotNull(HadamardFlowError):
    """A direction supposed to be null fails the null test."""


class MissingPrerequisite(HadamardFlowError):
    """A lower-level table required by this operation has not been built."""


class StencilTooNarrow(HadamardFlowError):
    """The requested point is too close to the table boundary for differencing."""


class OdeStepFailure(HadamardFlowError):
    """Transport ODE integration failed (step-size underflow or non-finite state)."""


class EnforcementFailure(HadamardFlowError):
    """Gauge enforcement could not push the source residual below tolerance."""

    def __init__(self, message, residual=None, tolerance=None):
        super().__init__(message)
        self.residual = residual
        self.tolerance = tolerance


class CoefficientVanishes(HadamardFlowError):
    """The coefficient multiplying the unknown in a transport equation is ~0."""

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class PoleHit(HadamardFlowError):
    """Evaluation requested exactly on the singular support (diagonal / cone at eps=0)."""


class FitDegenerate(HadamardFlowError):
    """A regression cannot be performed (too few points or signal below noise)."""


class ConfigInvalid(HadamardFlowError):
    """Scenario configuration failed validation."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class UnknownSuite(HadamardFlowError):
    """Verification suite name not recognized."""


class UnknownArtifact(HadamardFlowError):
    """Export requested for an artifact id that is not in the cache."""
