"""Dynamical system definitions: right-hand sides, Jacobians, uncertainty maps,
the sphere constraint, performance metrics, and the built-in benchmark models.

Built-in models are autonomous: the harmonic drive is generated internally by a
two-state limit-cycle (Stuart-Landau) oscillator appended to the mechanical
states, so the forcing frequency enters as an ordinary parameter.

All right-hand sides and Jacobians are numba-compiled with a common signature
``f(x, p) -> ndarray`` and are also plain-callable from Python.  The fused
kernels consumed by :mod:`orbitmargins.integrate` have signature
``kernel(y, p, dp_cols) -> dy``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numba import njit

from .exceptions import DegenerateOriginError, ModelError

__all__ = [
    "Metric",
    "ReferenceParameters",
    "SystemModel",
    "UncertaintyMap",
    "apply_uncertainty",
    "sphere_residual",
    "sphere_tangent_basis",
    "builtin_two_mode",
    "builtin_duffing",
    "linear_natural_frequencies",
    "make_augmented_kernel",
    "make_state_kernel",
    "check_derivatives",
    "TWO_MODE_PARAM_NAMES",
    "DUFFING_PARAM_NAMES",
]

TWO_MODE_PARAM_NAMES = (
    "m1", "m2", "c1", "c2", "c3", "k1", "k2", "k3",
    "alpha1", "alpha2", "alpha3", "F1", "F2", "omega",
)
DUFFING_PARAM_NAMES = ("m", "c", "k", "alpha", "F", "omega")


# ---------------------------------------------------------------------------
# Metric and parameter containers


@dataclass(frozen=True)
class Metric:
    """Scalar performance output g(x, p) and its derivatives.

    ``hess_x`` is the state Hessian of g; coordinate-projection metrics (all
    built-ins) have a zero Hessian, which keeps the phase-condition Jacobian
    exact.  Metrics whose state gradient depends on p are not supported.
    """

    name: str
    value: Callable[[np.ndarray, np.ndarray], float]
    grad_x: Callable[[np.ndarray, np.ndarray], np.ndarray]
    grad_p: Callable[[np.ndarray, np.ndarray], np.ndarray]
    hess_x: Callable[[np.ndarray, np.ndarray], np.ndarray]


def coordinate_metric(name: str, index: int, dim: int, n_params: int) -> Metric:
    """Metric that projects out a single state coordinate."""
    gx = np.zeros(dim)
    gx[index] = 1.0
    gp = np.zeros(n_params)
    hess = np.zeros((dim, dim))
    return Metric(
        name=name,
        value=lambda x, p, _i=index: float(x[_i]),
        grad_x=lambda x, p, _g=gx: _g,
        grad_p=lambda x, p, _g=gp: _g,
        hess_x=lambda x, p, _h=hess: _h,
    )


@dataclass(frozen=True)
class ReferenceParameters:
    """Named reference parameter vector with a designated bifurcation entry."""

    names: tuple[str, ...]
    values: np.ndarray
    lambda_index: int

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=float)
        if vals.ndim != 1 or vals.shape[0] != len(self.names):
            raise ModelError("parameter vector length does not match names")
        if not np.all(np.isfinite(vals)):
            raise ModelError("parameters must be finite")
        if not 0 <= self.lambda_index < len(self.names):
            raise ModelError("lambda_index out of range")
        object.__setattr__(self, "values", vals)

    @property
    def lambda_name(self) -> str:
        return self.names[self.lambda_index]

    @property
    def lam(self) -> float:
        return float(self.values[self.lambda_index])

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise ModelError(f"unknown parameter {name!r}") from None

    def with_lambda(self, lam: float) -> np.ndarray:
        """Reference vector with the bifurcation entry replaced by ``lam``."""
        p = self.values.copy()
        p[self.lambda_index] = lam
        return p

    def replace(self, **updates: float) -> "ReferenceParameters":
        p = self.values.copy()
        for name, value in updates.items():
            p[self.index(name)] = value
        return ReferenceParameters(self.names, p, self.lambda_index)

    def as_dict(self) -> dict[str, float]:
        return {n: float(v) for n, v in zip(self.names, self.values)}


@dataclass(frozen=True)
class UncertaintyMap:
    """Proportional uncertainty acting on a subset of named parameters.

    Each mapped parameter k with uncertainty component m is realized as
    ``p_k = p0_k * (1 + eps_m)``.  A parameter may appear at most once and the
    bifurcation parameter may not be uncertain.
    """

    names: tuple[str, ...]
    indices: tuple[int, ...]

    @classmethod
    def build(cls, params: ReferenceParameters, names) -> "UncertaintyMap":
        names = tuple(names)
        if len(names) < 1:
            raise ModelError("uncertainty map needs at least one parameter")
        if len(set(names)) != len(names):
            raise ModelError("parameter mapped more than once")
        idx = tuple(params.index(n) for n in names)
        if params.lambda_index in idx:
            raise ModelError("bifurcation parameter cannot be uncertain")
        return cls(names=names, indices=idx)

    @property
    def m(self) -> int:
        return len(self.names)

    def realize(self, p0: np.ndarray, eps: np.ndarray) -> np.ndarray:
        p = p0.copy()
        for j, k in enumerate(self.indices):
            p[k] = p0[k] * (1.0 + eps[j])
        return p

    def dp_deps(self, p0: np.ndarray) -> np.ndarray:
        out = np.zeros((p0.shape[0], self.m))
        for j, k in enumerate(self.indices):
            out[k, j] = p0[k]
        return out


def apply_uncertainty(
    params: ReferenceParameters, mapping: UncertaintyMap, eps: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Realize parameters under proportional uncertainty.

    Returns the realized vector p with mapped entries scaled by (1 + eps) and
    the constant partial derivative matrix dp/deps of shape (P, M).
    """
    eps = np.asarray(eps, dtype=float)
    if eps.shape != (mapping.m,):
        raise ModelError(f"eps must have shape ({mapping.m},)")
    return mapping.realize(params.values, eps), mapping.dp_deps(params.values)


# ---------------------------------------------------------------------------
# Sphere constraint


def sphere_residual(eps: np.ndarray, r: float) -> float:
    """Equality defect of the uncertainty sphere, sum(eps**2) - r**2."""
    eps = np.asarray(eps, dtype=float)
    return float(np.dot(eps, eps) - r * r)


def sphere_tangent_basis(eps: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the sphere tangent space at eps, shape (M-1, M).

    Deterministic Householder completion of eps/||eps||: the unit direction is
    reflected onto its largest-magnitude axis (smallest index on ties); the
    remaining reflector columns span the tangent space.  Rows satisfy
    basis @ eps = 0 and basis @ basis.T = I.
    """
    eps = np.asarray(eps, dtype=float)
    m = eps.shape[0]
    nrm = float(np.linalg.norm(eps))
    if nrm <= 0.0 or not np.isfinite(nrm):
        raise DegenerateOriginError("tangent basis undefined at eps = 0")
    if m == 1:
        return np.zeros((0, 1))
    u = eps / nrm
    k = int(np.argmax(np.abs(u)))
    s = 1.0 if u[k] >= 0.0 else -1.0
    v = u.copy()
    v[k] -= s
    vv = float(np.dot(v, v))
    if vv < 1e-30:
        # axis-aligned: reflector is the identity
        basis = np.eye(m)
    else:
        basis = np.eye(m) - np.outer(v, v) * (2.0 / vv)
    cols = [i for i in range(m) if i != k]
    return basis[:, cols].T.copy()


# ---------------------------------------------------------------------------
# System model container


@dataclass(frozen=True)
class SystemModel:
    """Behavioral description of an autonomous ODE system.

    ``rhs``, ``jac_x`` and ``jac_p`` are numba dispatchers with signature
    ``f(x, p)``; ``state_kernel`` and ``aug_kernel`` are the fused kernels
    used by the integrator.  ``metric`` is the active performance output.
    """

    name: str
    dim: int
    param_names: tuple[str, ...]
    lambda_index: int
    rhs: Callable
    jac_x: Callable
    jac_p: Callable
    metric: Metric
    state_kernel: Callable
    aug_kernel: Callable
    metric_names: tuple[str, ...] = field(default=())

    @property
    def n_params(self) -> int:
        return len(self.param_names)

    def param_index(self, name: str) -> int:
        try:
            return self.param_names.index(name)
        except ValueError:
            raise ModelError(f"unknown parameter {name!r}") from None

    def lambda_column(self) -> np.ndarray:
        """dp/dlambda as a (P, 1) column (the bifurcation entry selector)."""
        col = np.zeros((self.n_params, 1))
        col[self.lambda_index, 0] = 1.0
        return col


# ---------------------------------------------------------------------------
# Fused kernels (generic factory; built-ins use cached module-level variants)


def make_state_kernel(rhs):
    """Kernel integrating the plain state: y = x."""

    @njit
    def kernel(y, p, dpd):
        return rhs(y, p)

    return kernel


def make_augmented_kernel(rhs, jac_x, jac_p, dim):
    """Kernel for the augmented system y = [x; H (N*N); S (N*K); trace].

    H' = A H with H(0) = I; S' = A S + (dF/dp) dp_cols with S(0) = 0; the
    last slot accumulates the integral of trace(A) for the volume identity.
    K is inferred from dp_cols and may be zero.
    """
    n = dim

    @njit
    def kernel(y, p, dpd):
        x = y[:n]
        a = jac_x(x, p)
        k = dpd.shape[1]
        dy = np.empty(y.shape[0])
        dy[:n] = rhs(x, p)
        h = y[n:n + n * n].reshape(n, n)
        dy[n:n + n * n] = (a @ h).ravel()
        if k > 0:
            s = y[n + n * n:n + n * n + n * k].reshape(n, k)
            b = jac_p(x, p) @ dpd
            dy[n + n * n:n + n * n + n * k] = (a @ s + b).ravel()
        tr = 0.0
        for i in range(n):
            tr += a[i, i]
        dy[-1] = tr
        return dy

    return kernel


# ---------------------------------------------------------------------------
# Two-mode oscillator, autonomized (6 states)
#
# States: x = (q1, dq1, q2, dq2, s1, s2); the (s1, s2) pair settles on the
# unit circle and supplies the drive F*s2 with s2(t) = cos(omega t + phase).


@njit(cache=True)
def _two_mode_rhs(x, p):
    m1, m2 = p[0], p[1]
    c1, c2, c3 = p[2], p[3], p[4]
    k1, k2, k3 = p[5], p[6], p[7]
    a1, a2, a3 = p[8], p[9], p[10]
    f1, f2, w = p[11], p[12], p[13]
    d = x[0] - x[2]
    rr = x[4] * x[4] + x[5] * x[5]
    out = np.empty(6)
    out[0] = x[1]
    out[1] = (-(k1 + k2) * x[0] + k2 * x[2] - (c1 + c2) * x[1] + c2 * x[3]
              - a1 * x[0] ** 3 - a2 * d ** 3 + f1 * x[5]) / m1
    out[2] = x[3]
    out[3] = (-(k2 + k3) * x[2] + k2 * x[0] - (c2 + c3) * x[3] + c2 * x[1]
              - a3 * x[2] ** 3 + a2 * d ** 3 + f2 * x[5]) / m2
    out[4] = x[4] + w * x[5] - x[4] * rr
    out[5] = -w * x[4] + x[5] - x[5] * rr
    return out


@njit(cache=True)
def _two_mode_jac_x(x, p):
    m1, m2 = p[0], p[1]
    c1, c2, c3 = p[2], p[3], p[4]
    k1, k2, k3 = p[5], p[6], p[7]
    a1, a2, a3 = p[8], p[9], p[10]
    f1, f2, w = p[11], p[12], p[13]
    d2 = 3.0 * (x[0] - x[2]) ** 2
    a = np.zeros((6, 6))
    a[0, 1] = 1.0
    a[1, 0] = (-(k1 + k2) - 3.0 * a1 * x[0] ** 2 - a2 * d2) / m1
    a[1, 1] = -(c1 + c2) / m1
    a[1, 2] = (k2 + a2 * d2) / m1
    a[1, 3] = c2 / m1
    a[1, 5] = f1 / m1
    a[2, 3] = 1.0
    a[3, 0] = (k2 + a2 * d2) / m2
    a[3, 1] = c2 / m2
    a[3, 2] = (-(k2 + k3) - 3.0 * a3 * x[2] ** 2 - a2 * d2) / m2
    a[3, 3] = -(c2 + c3) / m2
    a[3, 5] = f2 / m2
    a[4, 4] = 1.0 - 3.0 * x[4] ** 2 - x[5] ** 2
    a[4, 5] = w - 2.0 * x[4] * x[5]
    a[5, 4] = -w - 2.0 * x[4] * x[5]
    a[5, 5] = 1.0 - x[4] ** 2 - 3.0 * x[5] ** 2
    return a


@njit(cache=True)
def _two_mode_jac_p(x, p):
    m1, m2 = p[0], p[1]
    c2 = p[3]
    k2 = p[6]
    a2 = p[9]
    d = x[0] - x[2]
    acc1 = (-(p[5] + k2) * x[0] + k2 * x[2] - (p[2] + c2) * x[1] + c2 * x[3]
            - p[8] * x[0] ** 3 - a2 * d ** 3 + p[11] * x[5]) / m1
    acc2 = (-(k2 + p[7]) * x[2] + k2 * x[0] - (c2 + p[4]) * x[3] + c2 * x[1]
            - p[10] * x[2] ** 3 + a2 * d ** 3 + p[12] * x[5]) / m2
    j = np.zeros((6, 14))
    j[1, 0] = -acc1 / m1
    j[3, 1] = -acc2 / m2
    j[1, 2] = -x[1] / m1
    j[1, 3] = (x[3] - x[1]) / m1
    j[3, 3] = (x[1] - x[3]) / m2
    j[3, 4] = -x[3] / m2
    j[1, 5] = -x[0] / m1
    j[1, 6] = (x[2] - x[0]) / m1
    j[3, 6] = (x[0] - x[2]) / m2
    j[3, 7] = -x[2] / m2
    j[1, 8] = -x[0] ** 3 / m1
    j[1, 9] = -d ** 3 / m1
    j[3, 9] = d ** 3 / m2
    j[3, 10] = -x[2] ** 3 / m2
    j[1, 11] = x[5] / m1
    j[3, 12] = x[5] / m2
    j[4, 13] = x[5]
    j[5, 13] = -x[4]
    return j


@njit(cache=True)
def _two_mode_state_kernel(y, p, dpd):
    return _two_mode_rhs(y, p)


@njit(cache=True)
def _two_mode_aug_kernel(y, p, dpd):
    n = 6
    x = y[:n]
    a = _two_mode_jac_x(x, p)
    k = dpd.shape[1]
    dy = np.empty(y.shape[0])
    dy[:n] = _two_mode_rhs(x, p)
    h = y[n:n + n * n].reshape(n, n)
    dy[n:n + n * n] = (a @ h).ravel()
    if k > 0:
        s = y[n + n * n:n + n * n + n * k].reshape(n, k)
        b = _two_mode_jac_p(x, p) @ dpd
        dy[n + n * n:n + n * n + n * k] = (a @ s + b).ravel()
    dy[-1] = a[1, 1] + a[3, 3] + a[4, 4] + a[5, 5]
    return dy


# ---------------------------------------------------------------------------
# Duffing oscillator, autonomized (4 states): x = (q, dq, s1, s2)


@njit(cache=True)
def _duffing_rhs(x, p):
    m, c, k, al, f, w = p[0], p[1], p[2], p[3], p[4], p[5]
    rr = x[2] * x[2] + x[3] * x[3]
    out = np.empty(4)
    out[0] = x[1]
    out[1] = (-c * x[1] - k * x[0] - al * x[0] ** 3 + f * x[3]) / m
    out[2] = x[2] + w * x[3] - x[2] * rr
    out[3] = -w * x[2] + x[3] - x[3] * rr
    return out


@njit(cache=True)
def _duffing_jac_x(x, p):
    m, c, k, al, f, w = p[0], p[1], p[2], p[3], p[4], p[5]
    a = np.zeros((4, 4))
    a[0, 1] = 1.0
    a[1, 0] = (-k - 3.0 * al * x[0] ** 2) / m
    a[1, 1] = -c / m
    a[1, 3] = f / m
    a[2, 2] = 1.0 - 3.0 * x[2] ** 2 - x[3] ** 2
    a[2, 3] = w - 2.0 * x[2] * x[3]
    a[3, 2] = -w - 2.0 * x[2] * x[3]
    a[3, 3] = 1.0 - x[2] ** 2 - 3.0 * x[3] ** 2
    return a


@njit(cache=True)
def _duffing_jac_p(x, p):
    m = p[0]
    acc = (-p[1] * x[1] - p[2] * x[0] - p[3] * x[0] ** 3 + p[4] * x[3]) / m
    j = np.zeros((4, 6))
    j[1, 0] = -acc / m
    j[1, 1] = -x[1] / m
    j[1, 2] = -x[0] / m
    j[1, 3] = -x[0] ** 3 / m
    j[1, 4] = x[3] / m
    j[2, 5] = x[3]
    j[3, 5] = -x[2]
    return j


@njit(cache=True)
def _duffing_state_kernel(y, p, dpd):
    return _duffing_rhs(y, p)


@njit(cache=True)
def _duffing_aug_kernel(y, p, dpd):
    n = 4
    x = y[:n]
    a = _duffing_jac_x(x, p)
    k = dpd.shape[1]
    dy = np.empty(y.shape[0])
    dy[:n] = _duffing_rhs(x, p)
    h = y[n:n + n * n].reshape(n, n)
    dy[n:n + n * n] = (a @ h).ravel()
    if k > 0:
        s = y[n + n * n:n + n * n + n * k].reshape(n, k)
        b = _duffing_jac_p(x, p) @ dpd
        dy[n + n * n:n + n * n + n * k] = (a @ s + b).ravel()
    dy[-1] = a[1, 1] + a[2, 2] + a[3, 3]
    return dy


# ---------------------------------------------------------------------------
# Built-in constructors


_TWO_MODE_METRICS = {"q1": 0, "q2": 2}
_DUFFING_METRICS = {"q": 0}


def builtin_two_mode(
    params: dict | None = None, *, metric: str = "q1", omega: float = 1.0
) -> tuple[SystemModel, ReferenceParameters]:
    """Two-mass cubic oscillator with internal harmonic drive, N = 6.

    ``params`` maps the 13 physical names (m1, m2, c1..c3, k1..k3,
    alpha1..alpha3, F1, F2) to values; omega is the bifurcation parameter.
    """
    values = dict(params or {})
    unknown = set(values) - set(TWO_MODE_PARAM_NAMES)
    if unknown:
        raise ModelError(f"unknown two-mode parameters: {sorted(unknown)}")
    p = np.array([values.get(n, 0.0) for n in TWO_MODE_PARAM_NAMES])
    p[13] = omega if "omega" not in values else values["omega"]
    if p[0] <= 0 or p[1] <= 0:
        raise ModelError("masses must be positive")
    if metric not in _TWO_MODE_METRICS:
        raise ModelError(f"metric must be one of {sorted(_TWO_MODE_METRICS)}")
    ref = ReferenceParameters(TWO_MODE_PARAM_NAMES, p, lambda_index=13)
    model = SystemModel(
        name="two_mode",
        dim=6,
        param_names=TWO_MODE_PARAM_NAMES,
        lambda_index=13,
        rhs=_two_mode_rhs,
        jac_x=_two_mode_jac_x,
        jac_p=_two_mode_jac_p,
        metric=coordinate_metric(metric, _TWO_MODE_METRICS[metric], 6, 14),
        state_kernel=_two_mode_state_kernel,
        aug_kernel=_two_mode_aug_kernel,
        metric_names=tuple(sorted(_TWO_MODE_METRICS)),
    )
    return model, ref


def builtin_duffing(
    params: dict | None = None, *, metric: str = "q", omega: float = 1.0
) -> tuple[SystemModel, ReferenceParameters]:
    """Single-mass cubic (Duffing) oscillator with internal drive, N = 4."""
    values = dict(params or {})
    unknown = set(values) - set(DUFFING_PARAM_NAMES)
    if unknown:
        raise ModelError(f"unknown duffing parameters: {sorted(unknown)}")
    p = np.array([values.get(n, 0.0) for n in DUFFING_PARAM_NAMES])
    p[5] = omega if "omega" not in values else values["omega"]
    if p[0] <= 0:
        raise ModelError("mass must be positive")
    if metric not in _DUFFING_METRICS:
        raise ModelError(f"metric must be one of {sorted(_DUFFING_METRICS)}")
    ref = ReferenceParameters(DUFFING_PARAM_NAMES, p, lambda_index=5)
    model = SystemModel(
        name="duffing",
        dim=4,
        param_names=DUFFING_PARAM_NAMES,
        lambda_index=5,
        rhs=_duffing_rhs,
        jac_x=_duffing_jac_x,
        jac_p=_duffing_jac_p,
        metric=coordinate_metric(metric, _DUFFING_METRICS[metric], 4, 6),
        state_kernel=_duffing_state_kernel,
        aug_kernel=_duffing_aug_kernel,
        metric_names=tuple(sorted(_DUFFING_METRICS)),
    )
    return model, ref


def linear_natural_frequencies(p: np.ndarray | dict) -> tuple[float, float]:
    """Undamped natural frequencies of the two-mode chain, sorted ascending.

    Square roots of the eigenvalues of M^-1 K with
    K = [[k1+k2, -k2], [-k2, k2+k3]] and M = diag(m1, m2).
    """
    if isinstance(p, dict):
        vals = p
    else:
        vals = dict(zip(TWO_MODE_PARAM_NAMES, np.asarray(p, dtype=float)))
    m1, m2 = vals["m1"], vals["m2"]
    if m1 <= 0 or m2 <= 0:
        raise ModelError("masses must be positive")
    k1, k2, k3 = vals["k1"], vals["k2"], vals["k3"]
    kmat = np.array([[k1 + k2, -k2], [-k2, k2 + k3]])
    eig = np.linalg.eigvals(np.diag([1.0 / m1, 1.0 / m2]) @ kmat)
    eig = np.sort(eig.real)
    if eig[0] <= 0:
        raise ModelError("stiffness matrix is not positive definite")
    return float(np.sqrt(eig[0])), float(np.sqrt(eig[1]))


# ---------------------------------------------------------------------------
# Derivative self-check


def check_derivatives(
    model: SystemModel,
    p: np.ndarray,
    n_points: int = 100,
    seed: int = 0,
    box: float = 1.0,
    rtol: float = 1e-5,
) -> dict[str, float]:
    """Compare analytic Jacobians and metric gradients to central differences.

    Random states are drawn from [-box, box]^N and parameters are jittered
    multiplicatively around ``p``.  Returns the worst relative mismatch per
    quantity; raises ModelError if any exceeds ``rtol``.
    """
    rng = np.random.default_rng(seed)
    p = np.asarray(p, dtype=float)
    worst = {"jac_x": 0.0, "jac_p": 0.0, "metric_grad_x": 0.0, "metric_grad_p": 0.0}
    for _ in range(n_points):
        x = rng.uniform(-box, box, size=model.dim)
        pj = p * (1.0 + rng.uniform(-0.3, 0.3, size=p.shape))
        scale_a = max(1.0, np.abs(model.jac_x(x, pj)).max())
        scale_b = max(1.0, np.abs(model.jac_p(x, pj)).max())
        a_fd = np.empty((model.dim, model.dim))
        for i in range(model.dim):
            h = 1e-6 * (1.0 + abs(x[i]))
            e = np.zeros(model.dim)
            e[i] = h
            a_fd[:, i] = (model.rhs(x + e, pj) - model.rhs(x - e, pj)) / (2 * h)
        worst["jac_x"] = max(
            worst["jac_x"], np.abs(a_fd - model.jac_x(x, pj)).max() / scale_a
        )
        b_fd = np.empty((model.dim, p.shape[0]))
        for i in range(p.shape[0]):
            h = 1e-6 * (1.0 + abs(pj[i]))
            e = np.zeros(p.shape[0])
            e[i] = h
            b_fd[:, i] = (model.rhs(x, pj + e) - model.rhs(x, pj - e)) / (2 * h)
        worst["jac_p"] = max(
            worst["jac_p"], np.abs(b_fd - model.jac_p(x, pj)).max() / scale_b
        )
        g = model.metric
        gx_fd = np.empty(model.dim)
        for i in range(model.dim):
            h = 1e-6 * (1.0 + abs(x[i]))
            e = np.zeros(model.dim)
            e[i] = h
            gx_fd[i] = (g.value(x + e, pj) - g.value(x - e, pj)) / (2 * h)
        worst["metric_grad_x"] = max(
            worst["metric_grad_x"], np.abs(gx_fd - g.grad_x(x, pj)).max()
        )
        gp_fd = np.empty(p.shape[0])
        for i in range(p.shape[0]):
            h = 1e-6 * (1.0 + abs(pj[i]))
            e = np.zeros(p.shape[0])
            e[i] = h
            gp_fd[i] = (g.value(x, pj + e) - g.value(x, pj - e)) / (2 * h)
        worst["metric_grad_p"] = max(
            worst["metric_grad_p"], np.abs(gp_fd - g.grad_p(x, pj)).max()
        )
    bad = {k: v for k, v in worst.items() if v > rtol}
    if bad:
        raise ModelError(f"derivative self-check failed: {bad}")
    return worst
