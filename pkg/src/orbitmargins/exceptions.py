"""Exception types shared across the package."""


class OrbitMarginsError(Exception):
    """Base class for all package errors."""


class ModelError(OrbitMarginsError):
    """Invalid model definition or parameter set."""


class IntegrationError(OrbitMarginsError):
    """Time integration failed (step budget, blow-up).

    Attributes
    ----------
    t_reached : float
        Integration time reached before the failure.
    reason : str
        One of ``"max-steps"`` or ``"nonfinite"``.
    """

    def __init__(self, reason: str, t_reached: float):
        self.reason = reason
        self.t_reached = t_reached
        super().__init__(f"integration failed ({reason}) at t = {t_reached:.6g}")


class ConvergenceError(OrbitMarginsError):
    """Newton iteration did not converge; carries the best iterate."""

    def __init__(self, message: str, best=None, residual_norm=None):
        self.best = best
        self.residual_norm = residual_norm
        super().__init__(message)


class NearBifurcationError(OrbitMarginsError):
    """Bordered sensitivity matrix is singular or too ill-conditioned."""


class MetricInsensitiveError(OrbitMarginsError):
    """Metric gradient with respect to uncertainty is numerically zero."""


class DegenerateOriginError(OrbitMarginsError):
    """Sphere tangent basis requested at the origin of uncertainty space."""


class BracketError(OrbitMarginsError):
    """Bisection bracket does not straddle the predicate transition."""


class ConfigError(OrbitMarginsError):
    """Run configuration violates the schema or is inconsistent."""
