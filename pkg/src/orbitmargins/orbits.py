"""Shooting residuals, Newton solution of single periodic orbits, and plain
forced-response-curve tracing at zero uncertainty.

The shooting system pairs the recurrence defect x(T) - x0 with a phase
condition that anchors x0 at an extremum of the performance metric over the
period (zero metric time derivative at t = 0).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConvergenceError, NearBifurcationError
from .integrate import IntegrationSettings, integrate_augmented, integrate_state
from .models import ReferenceParameters, SystemModel

__all__ = [
    "PeriodicOrbit",
    "periodicity_residual",
    "phase_residual",
    "solve_periodic_orbit",
    "linear_response_guess",
    "trace_frc",
]


@dataclass
class PeriodicOrbit:
    """Converged shooting solution at fixed realized parameters."""

    x0: np.ndarray
    T: float
    p: np.ndarray
    monodromy: np.ndarray
    residual_norm: float
    metric_value: float
    n_iter: int = 0


def periodicity_residual(
    model: SystemModel,
    p: np.ndarray,
    x0: np.ndarray,
    T: float,
    settings: IntegrationSettings = IntegrationSettings(),
) -> np.ndarray:
    """Recurrence defect x(T, p; x0) - x0 over one period."""
    return integrate_state(model, p, x0, T, settings) - np.asarray(x0, dtype=float)


def phase_residual(model: SystemModel, p: np.ndarray, x0: np.ndarray) -> float:
    """Metric time derivative at t = 0: grad_x g . F(x0, p)."""
    x0 = np.asarray(x0, dtype=float)
    return float(model.metric.grad_x(x0, p) @ model.rhs(x0, p))


def _phase_jac_x(model: SystemModel, p: np.ndarray, x0: np.ndarray) -> np.ndarray:
    """d(phase residual)/dx0 = grad_x g . A + F^T hess_x g."""
    g = model.metric
    return g.grad_x(x0, p) @ model.jac_x(x0, p) + model.rhs(x0, p) @ g.hess_x(x0, p)


def solve_periodic_orbit(
    model: SystemModel,
    p: np.ndarray,
    x0_guess: np.ndarray,
    T_guess: float,
    settings: IntegrationSettings = IntegrationSettings(),
    newton_tol: float = 1e-10,
    max_iter: int = 20,
    anchor_max: bool = True,
) -> PeriodicOrbit:
    """Newton solve of the (N+1)-unknown shooting system for (x0, T).

    Jacobian rows come from one augmented integration per iteration:
    [H_T - I, F(x(T))] for the recurrence block and the analytic phase-row
    [grad_x g . A(x0), 0].  Steps are halved up to four times when the
    residual norm increases.  Raises ConvergenceError with the best iterate
    attached if the tolerance is not met within ``max_iter`` iterations.

    With ``anchor_max`` (default) the converged anchor is normalized to the
    metric's maximum over the period: the phase condition holds at every
    metric extremum, and anchoring all fresh solves at the maximum makes the
    stored metric value the orbit's amplitude and keeps margin families
    comparable across independently seeded orbits.
    """
    orbit = _solve_shooting(model, p, x0_guess, T_guess, settings,
                            newton_tol, max_iter)
    if not anchor_max:
        return orbit
    for _ in range(2):
        shifted = _metric_peak_state(model, orbit, settings)
        if shifted is None:
            break
        orbit = _solve_shooting(model, p, shifted, orbit.T, settings,
                                newton_tol, max_iter)
    return orbit


def _metric_peak_state(model, orbit, settings):
    """State near the metric maximum along the orbit, or None if x0 is it."""
    _, ts, ys = integrate_state(
        model, orbit.p, orbit.x0, orbit.T,
        IntegrationSettings(rtol=settings.rtol, atol=settings.atol,
                            max_steps=settings.max_steps, dense=True),
    )
    g = np.array([model.metric.value(ys[i], orbit.p) for i in range(ys.shape[0])])
    k = int(np.argmax(g))
    if g[k] <= orbit.metric_value + 1e-12 + 1e-9 * abs(orbit.metric_value):
        return None
    return ys[k]


def _solve_shooting(
    model: SystemModel,
    p: np.ndarray,
    x0_guess: np.ndarray,
    T_guess: float,
    settings: IntegrationSettings,
    newton_tol: float,
    max_iter: int,
) -> PeriodicOrbit:
    p = np.ascontiguousarray(p, dtype=float)
    x0 = np.asarray(x0_guess, dtype=float).copy()
    T = float(T_guess)
    n = model.dim
    best = None
    best_norm = np.inf
    res, aug = _shooting_residual(model, p, x0, T, settings)
    norm = float(np.abs(res).max())
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        if norm < newton_tol:
            break
        jac = np.zeros((n + 1, n + 1))
        jac[:n, :n] = aug.H_T - np.eye(n)
        jac[:n, n] = model.rhs(aug.x_T, p)
        jac[n, :n] = _phase_jac_x(model, p, x0)
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            raise NearBifurcationError(
                "singular shooting Jacobian (fold or branch point nearby)"
            ) from None
        lam = 1.0
        for _ in range(5):
            x0_new = x0 + lam * step[:n]
            T_new = T + lam * step[n]
            if T_new > 0:
                res_new, aug_new = _shooting_residual(model, p, x0_new, T_new, settings)
                norm_new = float(np.abs(res_new).max())
                if norm_new < norm or lam <= 1.0 / 16.0:
                    break
            lam *= 0.5
        else:
            raise ConvergenceError("damped Newton stalled", best=best,
                                   residual_norm=best_norm)
        x0, T, res, aug, norm = x0_new, T_new, res_new, aug_new, norm_new
        if norm < best_norm:
            best_norm = norm
            best = (x0.copy(), T)
    if norm >= newton_tol:
        raise ConvergenceError(
            f"no convergence in {max_iter} iterations (norm {norm:.3e})",
            best=best, residual_norm=norm,
        )
    return PeriodicOrbit(
        x0=x0, T=T, p=p, monodromy=aug.H_T,
        residual_norm=norm,
        metric_value=float(model.metric.value(x0, p)),
        n_iter=n_iter - 1,
    )


def _shooting_residual(model, p, x0, T, settings):
    aug = integrate_augmented(model, p, x0, T, None, settings)
    res = np.empty(model.dim + 1)
    res[:model.dim] = aug.x_T - x0
    res[model.dim] = phase_residual(model, p, x0)
    return res, aug


def linear_response_guess(model: SystemModel, p: np.ndarray) -> np.ndarray:
    """Initial state from the undamped linear response to the internal drive.

    The limit-cycle pair starts at (s1, s2) = (0, 1) so the drive is at its
    positive extremum; displacements take the static-linear amplitude
    (K - omega^2 M)^-1 F and velocities start at zero, which is consistent
    with the metric-extremum phase below resonance.
    """
    p = np.asarray(p, dtype=float)
    x0 = np.zeros(model.dim)
    if model.name == "two_mode":
        m1, m2 = p[0], p[1]
        k1, k2, k3 = p[5], p[6], p[7]
        w = p[13]
        kmat = np.array([[k1 + k2 - w * w * m1, -k2], [-k2, k2 + k3 - w * w * m2]])
        try:
            q = np.linalg.solve(kmat, np.array([p[11], p[12]]))
        except np.linalg.LinAlgError:
            q = np.zeros(2)
        x0[0], x0[2] = q
        x0[5] = 1.0
    elif model.name == "duffing":
        m, k, f, w = p[0], p[2], p[4], p[5]
        denom = k - w * w * m
        x0[0] = f / denom if abs(denom) > 1e-12 else 0.0
        x0[3] = 1.0
    else:
        x0[-1] = 1.0
    return x0


def trace_frc(
    model: SystemModel,
    params: ReferenceParameters,
    omega_range: tuple[float, float],
    settings: IntegrationSettings = IntegrationSettings(),
    eps=None,
    mapping=None,
    continuation=None,
    seed_orbit: PeriodicOrbit | None = None,
):
    """Trace the forced response curve over ``omega_range`` at fixed epsilon.

    Pseudo-arclength continuation of the shooting-plus-phase system in
    (x0, T, omega), traversing folds.  ``eps``/``mapping`` realize frozen
    nonzero uncertainty for oracle samples; the default is the reference
    system.  Returns a Branch ordered from the low-frequency end.
    """
    from .continuation import ContinuationSettings, FrcProblem, continue_branch

    cont = continuation or ContinuationSettings()
    lo, hi = float(omega_range[0]), float(omega_range[1])
    if not lo < hi:
        raise ValueError("omega_range must be increasing")
    problem = FrcProblem(
        model=model, params=params, mapping=mapping, eps=eps,
        lambda_range=(lo, hi), integration=settings, continuation=cont,
    )
    if seed_orbit is None:
        p_seed = problem.realize(lo)[0]
        x0 = linear_response_guess(model, p_seed)
        seed_orbit = solve_periodic_orbit(
            model, p_seed, x0, 2 * np.pi / lo, settings,
            newton_tol=cont.newton_tol,
        )
    v0 = problem.pack(seed_orbit.x0, seed_orbit.T, lo)
    return continue_branch(problem, v0, direction=+1)
