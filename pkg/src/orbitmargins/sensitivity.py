"""Initial-state parametric sensitivities via the bordered linear solve, the
metric's uncertainty gradient, and the extremal-in-uncertainty residual.

Differentiating the recurrence and phase conditions with respect to the
uncertainty gives a bordered linear system whose matrix couples the monodromy
deficiency H_T - I with the flow direction and the phase-condition gradient;
its right-hand side carries the zero-initial-condition sensitivities S(T).
Solving it yields how the anchored initial state and the period respond to
uncertainty, from which the metric's gradient on the uncertainty sphere
follows by the chain rule.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import NearBifurcationError
from .integrate import IntegrationSettings, integrate_augmented
from .models import (
    ReferenceParameters,
    SystemModel,
    UncertaintyMap,
    sphere_tangent_basis,
)
from .orbits import PeriodicOrbit, _phase_jac_x

__all__ = [
    "SensitivitySolution",
    "solve_initial_sensitivity",
    "metric_uncertainty_gradient",
    "extremal_uncertainty_residual",
    "bordered_sensitivity",
    "uncertainty_gradient",
]


@dataclass
class SensitivitySolution:
    """Initial-state and period sensitivities to the uncertainty components."""

    S0: np.ndarray
    dT_deps: np.ndarray
    condition_estimate: float


def bordered_sensitivity(
    model: SystemModel,
    p: np.ndarray,
    x0: np.ndarray,
    H_T: np.ndarray,
    S_T: np.ndarray,
    flow_T: np.ndarray,
    dp_deps: np.ndarray,
    cond_limit: float = 1e12,
) -> SensitivitySolution:
    """Solve the bordered system for S0 and dT/deps given integrated blocks.

    Matrix: [[H_T - I, flow_T], [dL_t/dx0, 0]]; right-hand side columns:
    [-S_T; -dL_t/dp . dp_deps].  ``flow_T`` is F(x(T), p).  A 2-norm condition
    estimate above ``cond_limit`` raises NearBifurcationError.
    """
    n = model.dim
    m = dp_deps.shape[1]
    mat = np.zeros((n + 1, n + 1))
    mat[:n, :n] = H_T - np.eye(n)
    mat[:n, n] = flow_T
    mat[n, :n] = _phase_jac_x(model, p, x0)
    rhs = np.zeros((n + 1, m))
    rhs[:n, :] = -S_T[:, :m]
    dlt_dp = model.metric.grad_x(x0, p) @ model.jac_p(x0, p)
    rhs[n, :] = -(dlt_dp @ dp_deps)
    cond = float(np.linalg.cond(mat))
    if not np.isfinite(cond) or cond > cond_limit:
        raise NearBifurcationError(
            f"bordered sensitivity matrix ill-conditioned (cond ~ {cond:.2e})"
        )
    sol = np.linalg.solve(mat, rhs)
    return SensitivitySolution(
        S0=sol[:n, :], dT_deps=sol[n, :].copy(), condition_estimate=cond
    )


def solve_initial_sensitivity(
    orbit: PeriodicOrbit,
    model: SystemModel,
    mapping: UncertaintyMap,
    params: ReferenceParameters,
    eps: np.ndarray | None = None,
    settings: IntegrationSettings = IntegrationSettings(),
    cond_limit: float = 1e12,
) -> SensitivitySolution:
    """Sensitivities of a converged orbit's initial state to the uncertainty.

    Runs one augmented integration over the orbit for the monodromy and the
    zero-initial-condition parametric sensitivities, then the bordered solve.
    ``eps`` locates the realization at which dp/deps is taken (default 0).
    """
    if eps is None:
        eps = np.zeros(mapping.m)
    dp_deps = mapping.dp_deps(params.values)
    aug = integrate_augmented(model, orbit.p, orbit.x0, orbit.T, dp_deps, settings)
    flow = model.rhs(aug.x_T, orbit.p)
    return bordered_sensitivity(
        model, orbit.p, orbit.x0, aug.H_T, aug.S_T, flow, dp_deps, cond_limit
    )


def metric_uncertainty_gradient(
    model: SystemModel,
    p: np.ndarray,
    x0: np.ndarray,
    sens: SensitivitySolution,
    dp_deps: np.ndarray,
) -> np.ndarray:
    """Gradient of the metric with respect to the uncertainty components.

    grad_x g . S0 + grad_p g . dp/deps, with the state-to-initial-state map at
    t = 0 being the identity.
    """
    g = model.metric
    return g.grad_x(x0, p) @ sens.S0 + g.grad_p(x0, p) @ dp_deps


def extremal_uncertainty_residual(grad_eps: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Project the uncertainty gradient onto the sphere tangent space.

    Zero exactly when the metric gradient is normal to the sphere at eps, the
    first-order condition for a constrained extremum.  Length M-1.
    """
    return sphere_tangent_basis(eps) @ grad_eps


def uncertainty_gradient(
    model: SystemModel,
    p: np.ndarray,
    x0: np.ndarray,
    H_T: np.ndarray,
    S_T: np.ndarray,
    flow_T: np.ndarray,
    dp_deps: np.ndarray,
    cond_limit: float = 1e12,
) -> tuple[SensitivitySolution, np.ndarray]:
    """Bordered solve plus chain rule in one call (continuation hot path)."""
    sens = bordered_sensitivity(
        model, p, x0, H_T, S_T, flow_T, dp_deps, cond_limit
    )
    return sens, metric_uncertainty_gradient(model, p, x0, sens, dp_deps)
