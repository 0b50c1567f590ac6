"""Adaptive time integration of the state ODE and of the augmented system
carrying the variational matrix, parametric sensitivities, and the Jacobian
trace accumulator.

The stepper is an explicit Dormand-Prince 5(4) embedded pair with PI step-size
control.  For the augmented system the error estimate is computed over the
state components only, so the variational and sensitivity blocks share exactly
the state's accepted step sequence and stay consistent with the trajectory
used in Newton matrices.  Everything is deterministic for fixed inputs.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit

from .exceptions import IntegrationError
from .models import SystemModel

__all__ = ["IntegrationSettings", "AugmentedResult", "integrate_state", "integrate_augmented"]


@dataclass(frozen=True)
class IntegrationSettings:
    """Tolerances and budgets for one integration run."""

    rtol: float = 1e-10
    atol: float = 1e-12
    max_steps: int = 1_000_000
    dense: bool = False

    def __post_init__(self):
        if self.rtol <= 0 or self.atol <= 0:
            raise ValueError("tolerances must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be at least 1")


@dataclass
class AugmentedResult:
    """Terminal state of one augmented integration over [0, T].

    ``H_T`` maps initial-state perturbations to time-T perturbations (the
    monodromy matrix when x0 closes an orbit of period T); ``S_T`` is the
    time-T parametric sensitivity with zero initial sensitivity, one column
    per requested parameter direction; ``trace_integral`` is the time integral
    of trace(dF/dx) along the trajectory.
    """

    x_T: np.ndarray
    H_T: np.ndarray
    S_T: np.ndarray
    trace_integral: float
    times: np.ndarray | None = None
    states: np.ndarray | None = None


# Dormand-Prince 5(4) tableau; the 5th-order solution propagates and the
# first-same-as-last stage provides the order-4 error estimate.
_C = (0.2, 0.3, 0.8, 8.0 / 9.0)
_A21 = 0.2
_A31, _A32 = 3.0 / 40.0, 9.0 / 40.0
_A41, _A42, _A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
_A51, _A52, _A53, _A54 = (19372.0 / 6561.0, -25360.0 / 2187.0,
                          64448.0 / 6561.0, -212.0 / 729.0)
_A61, _A62, _A63, _A64, _A65 = (9017.0 / 3168.0, -355.0 / 33.0,
                                46732.0 / 5247.0, 49.0 / 176.0,
                                -5103.0 / 18656.0)
_B1, _B3, _B4, _B5, _B6 = (35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0,
                           -2187.0 / 6784.0, 11.0 / 84.0)
_E1, _E3, _E4, _E5, _E6, _E7 = (71.0 / 57600.0, -71.0 / 16695.0, 71.0 / 1920.0,
                                -17253.0 / 339200.0, 22.0 / 525.0, -1.0 / 40.0)

_OK, _MAX_STEPS, _NONFINITE = 0, 1, 2


@njit
def _dp54(kernel, y0, p, dpd, t_end, rtol, atol, n_err, max_steps, record):
    """Core adaptive loop.  Error is measured on the first n_err components.

    Returns (y, status, t_reached, n_accepted, dense_t, dense_y); dense arrays
    hold accepted steps only (including t = 0) when record is true.
    """
    y = y0.copy()
    t = 0.0
    f0 = kernel(y, p, dpd)

    # deterministic initial step (Hairer-style, on the error-controlled block)
    d0 = 0.0
    d1 = 0.0
    for i in range(n_err):
        sc = atol + rtol * abs(y[i])
        d0 += (y[i] / sc) ** 2
        d1 += (f0[i] / sc) ** 2
    d0 = np.sqrt(d0 / n_err)
    d1 = np.sqrt(d1 / n_err)
    h = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h = min(h, t_end)
    y1 = y + h * f0
    f1 = kernel(y1, p, dpd)
    d2 = 0.0
    for i in range(n_err):
        sc = atol + rtol * abs(y[i])
        d2 += ((f1[i] - f0[i]) / sc) ** 2
    d2 = np.sqrt(d2 / n_err) / h
    dm = max(d1, d2)
    h1 = max(1e-6, (0.01 / dm) ** 0.2) if dm > 1e-15 else max(1e-6, h * 1e3)
    h = min(100.0 * h, h1, t_end)

    cap = 1024
    dense_t = np.empty(cap)
    dense_y = np.empty((cap, y.shape[0]))
    ndense = 0
    if record:
        dense_t[0] = 0.0
        dense_y[0] = y
        ndense = 1

    k1 = f0
    err_prev = 1e-4
    n_acc = 0
    n_steps = 0
    rejected = False
    while t < t_end:
        if n_steps >= max_steps:
            return y, _MAX_STEPS, t, n_acc, dense_t[:ndense], dense_y[:ndense]
        n_steps += 1
        if t + h >= t_end:
            h = t_end - t
        k2 = kernel(y + h * (_A21 * k1), p, dpd)
        k3 = kernel(y + h * (_A31 * k1 + _A32 * k2), p, dpd)
        k4 = kernel(y + h * (_A41 * k1 + _A42 * k2 + _A43 * k3), p, dpd)
        k5 = kernel(y + h * (_A51 * k1 + _A52 * k2 + _A53 * k3 + _A54 * k4), p, dpd)
        k6 = kernel(y + h * (_A61 * k1 + _A62 * k2 + _A63 * k3 + _A64 * k4
                             + _A65 * k5), p, dpd)
        ynew = y + h * (_B1 * k1 + _B3 * k3 + _B4 * k4 + _B5 * k5 + _B6 * k6)
        k7 = kernel(ynew, p, dpd)

        err = 0.0
        finite = True
        for i in range(n_err):
            e = h * (_E1 * k1[i] + _E3 * k3[i] + _E4 * k4[i] + _E5 * k5[i]
                     + _E6 * k6[i] + _E7 * k7[i])
            sc = atol + rtol * max(abs(y[i]), abs(ynew[i]))
            err += (e / sc) ** 2
            if not np.isfinite(ynew[i]):
                finite = False
        err = np.sqrt(err / n_err)

        if not (finite and np.isfinite(err)):
            h *= 0.2
            rejected = True
            if h < 1e-14 * max(1.0, t_end):
                return y, _NONFINITE, t, n_acc, dense_t[:ndense], dense_y[:ndense]
            continue

        if err <= 1.0:
            t += h
            y = ynew
            k1 = k7
            n_acc += 1
            if record:
                if ndense == cap:
                    cap *= 2
                    nt = np.empty(cap)
                    ny = np.empty((cap, y.shape[0]))
                    nt[:ndense] = dense_t[:ndense]
                    ny[:ndense] = dense_y[:ndense]
                    dense_t = nt
                    dense_y = ny
                dense_t[ndense] = t
                dense_y[ndense] = y
                ndense += 1
            # PI controller; growth capped right after a rejection
            if err < 1e-300:
                fac = 5.0
            else:
                fac = 0.9 * err ** -0.14 * err_prev ** 0.08
            if rejected:
                fac = min(fac, 1.0)
            h *= min(5.0, max(0.2, fac))
            err_prev = max(err, 1e-16)
            rejected = False
        else:
            h *= max(0.2, 0.9 * err ** -0.2)
            rejected = True
            if h < 1e-14 * max(1.0, t_end):
                return y, _NONFINITE, t, n_acc, dense_t[:ndense], dense_y[:ndense]
    return y, _OK, t, n_acc, dense_t[:ndense], dense_y[:ndense]


def _run(kernel, y0, p, dpd, t_end, settings, n_err):
    y, status, t_reached, _, ts, ys = _dp54(
        kernel, y0, p, dpd, float(t_end), settings.rtol, settings.atol,
        n_err, settings.max_steps, settings.dense,
    )
    if status == _MAX_STEPS:
        raise IntegrationError("max-steps", t_reached)
    if status == _NONFINITE:
        raise IntegrationError("nonfinite", t_reached)
    return y, ts, ys


def integrate_state(
    model: SystemModel,
    p: np.ndarray,
    x0: np.ndarray,
    T: float,
    settings: IntegrationSettings = IntegrationSettings(),
):
    """Solve dx/dt = F(x, p) from x0 over [0, T].

    Returns x(T), or (x(T), times, states) when dense output is requested.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    x0 = np.ascontiguousarray(x0, dtype=float)
    if x0.shape != (model.dim,):
        raise ValueError(f"x0 must have shape ({model.dim},)")
    dpd = np.zeros((model.n_params, 0))
    y, ts, ys = _run(model.state_kernel, x0, np.ascontiguousarray(p, dtype=float),
                     dpd, T, settings, model.dim)
    if settings.dense:
        return y, ts, ys
    return y


def integrate_augmented(
    model: SystemModel,
    p: np.ndarray,
    x0: np.ndarray,
    T: float,
    dp_cols: np.ndarray | None = None,
    settings: IntegrationSettings = IntegrationSettings(),
) -> AugmentedResult:
    """Co-integrate state, variational matrix, sensitivities and trace.

    ``dp_cols`` is a (P, K) matrix of parameter directions; column j yields
    the sensitivity of x(T) to that direction with zero initial sensitivity.
    The step sequence is controlled by the state error alone.
    """
    if T <= 0:
        raise ValueError("T must be positive")
    x0 = np.ascontiguousarray(x0, dtype=float)
    n = model.dim
    if x0.shape != (n,):
        raise ValueError(f"x0 must have shape ({n},)")
    if dp_cols is None:
        dp_cols = np.zeros((model.n_params, 0))
    dp_cols = np.ascontiguousarray(dp_cols, dtype=float)
    if dp_cols.ndim != 2 or dp_cols.shape[0] != model.n_params:
        raise ValueError(f"dp_cols must have shape ({model.n_params}, K)")
    k = dp_cols.shape[1]
    y0 = np.zeros(n + n * n + n * k + 1)
    y0[:n] = x0
    y0[n:n + n * n] = np.eye(n).ravel()
    y, ts, ys = _run(model.aug_kernel, y0, np.ascontiguousarray(p, dtype=float),
                     dp_cols, T, settings, n)
    res = AugmentedResult(
        x_T=y[:n].copy(),
        H_T=y[n:n + n * n].reshape(n, n).copy(),
        S_T=y[n + n * n:n + n * n + n * k].reshape(n, k).copy(),
        trace_integral=float(y[-1]),
    )
    if settings.dense:
        res.times = ts
        res.states = ys
    return res
