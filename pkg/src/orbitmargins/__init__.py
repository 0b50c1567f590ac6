"""Response margins of periodic orbits under bounded proportional parametric
uncertainty, computed with a two-step successive continuation scheme and
validated against a grid-simulation oracle."""

from .exceptions import (
    BracketError,
    ConfigError,
    ConvergenceError,
    DegenerateOriginError,
    IntegrationError,
    MetricInsensitiveError,
    ModelError,
    NearBifurcationError,
    OrbitMarginsError,
)
from .integrate import AugmentedResult, IntegrationSettings, integrate_augmented, integrate_state
from .models import (
    Metric,
    ReferenceParameters,
    SystemModel,
    UncertaintyMap,
    apply_uncertainty,
    builtin_duffing,
    builtin_two_mode,
    check_derivatives,
    linear_natural_frequencies,
    sphere_residual,
    sphere_tangent_basis,
)

__version__ = "0.1.0"
