"""Shared exception types."""


class DomainError(ValueError):
    """Point lies outside the chart or metric domain."""


class MetricError(ValueError):
    """Metric model violates a structural requirement (e.g. positivity)."""


class CollarFoldError(RuntimeError):
    """Normal exponential map folded inside the requested collar."""


class TrappedRayError(RuntimeError):
    """Ray exceeded the trapping time cap without exiting."""


class QuadratureError(RuntimeError):
    """A quadrature failed to converge to the requested tolerance."""


class SolverError(RuntimeError):
    """An iterative solver failed (non-convergence, step failure)."""
