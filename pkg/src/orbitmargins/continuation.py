"""Pseudo-arclength predictor-corrector engine and the two uncertainty
drivers: expansion of the uncertainty level from the reference solution, and
propagation of the resulting marginal extrema through the bifurcation
parameter.  Also hosts closed-loop (detached margin) detection and bisection
for the critical uncertainty level at which a detached margin appears.

Variable layouts (free unknowns only; the remaining quantity is frozen):

* response-curve tracing: v = [x0; T; lambda], eps frozen
* expansion:              v = [x0; eps; r; T], lambda frozen
* propagation:            v = [x0; eps; T; lambda], r frozen at the margin

All residual stacks are underdetermined by exactly one; tangents, step
control, and distances operate in componentwise-scaled coordinates.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import (
    BracketError,
    ConvergenceError,
    DegenerateOriginError,
    IntegrationError,
    MetricInsensitiveError,
    NearBifurcationError,
)

_STEP_ERRORS = (ConvergenceError, NearBifurcationError, IntegrationError,
                DegenerateOriginError)
from .integrate import IntegrationSettings, integrate_augmented, integrate_state
from .models import (
    ReferenceParameters,
    SystemModel,
    UncertaintyMap,
    sphere_residual,
    sphere_tangent_basis,
)
from .orbits import PeriodicOrbit, _phase_jac_x, phase_residual
from .sensitivity import uncertainty_gradient

__all__ = [
    "ContinuationSettings",
    "ContinuationPoint",
    "Branch",
    "MarginalPoint",
    "ExpansionResult",
    "ZeroProblem",
    "FrcProblem",
    "ExpandProblem",
    "PropagateProblem",
    "tangent",
    "predict_correct",
    "continue_branch",
    "expand_uncertainty",
    "propagate_margins",
    "locate_critical_level",
    "dedup_branches",
]

RANGE_EXIT = "range-exit"
MAX_STEPS = "max-steps"
STEP_UNDERFLOW = "step-underflow"
CLOSED_LOOP = "closed-loop"
DEGENERATE_TANGENT = "degenerate-tangent"


@dataclass(frozen=True)
class ContinuationSettings:
    """Step control, corrector, and detection thresholds."""

    h_init: float = 0.01
    h_min: float = 1e-6
    h_max: float = 0.1
    grow: float = 1.3
    max_halvings: int = 6
    newton_tol: float = 1e-9
    max_newton: int = 8
    max_steps: int = 20000
    fd_step: float = 1e-6
    loop_tol: float = 1e-4
    loop_arc_factor: float = 20.0
    dedup_tol: float = 1e-6
    cond_limit: float = 1e12
    easy_iters: int = 4
    # caps on the accepted step's projection onto the continuation parameter
    # and the metric; they bound the chord error of envelope interpolation
    max_dlam: float = np.inf
    max_dmetric: float = np.inf


@dataclass
class ContinuationPoint:
    """One converged point of a zero problem, with its outgoing tangent."""

    x0: np.ndarray
    eps: np.ndarray
    r: float
    T: float
    lam: float
    tangent: np.ndarray
    metric_value: float
    residual_norm: float
    step_index: int = 0


@dataclass
class Branch:
    """Ordered continuation points plus termination bookkeeping."""

    points: list[ContinuationPoint]
    termination: str
    family: str = ""
    termination_backward: str | None = None
    provenance: dict = field(default_factory=dict)

    @property
    def closed_loop(self) -> bool:
        return self.termination == CLOSED_LOOP or self.termination_backward == CLOSED_LOOP

    @property
    def lambdas(self) -> np.ndarray:
        return np.array([pt.lam for pt in self.points])

    @property
    def metric_values(self) -> np.ndarray:
        return np.array([pt.metric_value for pt in self.points])

    def fold_lambdas(self) -> list[float]:
        """Lambda values where the branch direction reverses in lambda."""
        lams = self.lambdas
        if lams.size < 3:
            return []
        d = np.diff(lams)
        folds = []
        for i in range(len(d) - 1):
            if d[i] * d[i + 1] < 0:
                folds.append(float(lams[i + 1]))
        return folds


@dataclass
class MarginalPoint:
    """A transversal crossing of the marginal uncertainty level."""

    point: ContinuationPoint
    family: str
    seed_lambda: float
    crossing_index: int
    seed_orbit_index: int = 0


@dataclass
class ExpansionResult:
    marginal_points: list[MarginalPoint]
    branches: list[Branch]
    skipped_crossings: int = 0


class _EvalCache:
    __slots__ = ("p", "aug", "flow", "dp_deps", "grad_eps", "sens")

    def __init__(self, p, aug, flow, dp_deps=None, grad_eps=None, sens=None):
        self.p = p
        self.aug = aug
        self.flow = flow
        self.dp_deps = dp_deps
        self.grad_eps = grad_eps
        self.sens = sens


# ---------------------------------------------------------------------------
# Zero problems


class ZeroProblem:
    """Residual map over a designated set of free variables.

    Concrete subclasses fix the variable layout and the frozen quantities;
    ``n_free == n_eq + 1`` always holds.
    """

    model: SystemModel
    params: ReferenceParameters
    integration: IntegrationSettings
    continuation: ContinuationSettings

    n_free: int
    n_eq: int
    cont_index: int
    # refresh the corrector Jacobian at the predictor when it is cheap
    # (analytic); with a differenced extremal row the frozen one wins
    cheap_jacobian = False

    def unpack(self, v: np.ndarray):
        raise NotImplementedError

    def residual(self, v: np.ndarray):
        raise NotImplementedError

    def jacobian(self, v: np.ndarray, cache: _EvalCache) -> np.ndarray:
        raise NotImplementedError

    def scale(self, v_seed: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def in_range(self, v: np.ndarray) -> bool:
        return True

    def residual_scale(self, v_seed: np.ndarray) -> float:
        x0 = v_seed[:self.model.dim]
        return max(1.0, float(np.abs(x0).max()))

    def metric_of(self, v: np.ndarray) -> float:
        x0, eps, _, _, lam = self.unpack(v)
        p0 = self.params.with_lambda(lam)
        mapping = getattr(self, "mapping", None)
        p = mapping.realize(p0, eps) if (mapping is not None and len(eps)) else p0
        return float(self.model.metric.value(np.asarray(x0, dtype=float), p))


class FrcProblem(ZeroProblem):
    """Forced response curve: recurrence + phase in (x0, T, lambda).

    ``eps``/``mapping`` freeze a nonzero uncertainty realization (used by the
    grid oracle); the default traces the reference system.
    """

    cheap_jacobian = True

    def __init__(self, model, params, lambda_range, mapping=None, eps=None,
                 integration=IntegrationSettings(),
                 continuation=ContinuationSettings()):
        self.model = model
        self.params = params
        self.mapping = mapping
        self.eps = np.zeros(0) if eps is None else np.asarray(eps, dtype=float)
        self.lambda_range = (float(lambda_range[0]), float(lambda_range[1]))
        self.integration = integration
        self.continuation = continuation
        n = model.dim
        self.n_free = n + 2
        self.n_eq = n + 1
        self.cont_index = n + 1

    def realize(self, lam: float):
        p0 = self.params.with_lambda(lam)
        if self.mapping is not None and self.eps.size:
            return self.mapping.realize(p0, self.eps), None
        return p0, None

    def pack(self, x0, T, lam) -> np.ndarray:
        return np.concatenate([np.asarray(x0, dtype=float), [float(T), float(lam)]])

    def unpack(self, v):
        n = self.model.dim
        return v[:n], self.eps, float(np.linalg.norm(self.eps)), float(v[n]), float(v[n + 1])

    def residual(self, v):
        x0, _, _, T, lam = self.unpack(v)
        p, _ = self.realize(lam)
        x_T = integrate_state(self.model, p, x0, T, self.integration)
        res = np.empty(self.n_eq)
        res[:self.model.dim] = x_T - x0
        res[self.model.dim] = phase_residual(self.model, p, x0)
        return res, _EvalCache(p=p, aug=None, flow=None)

    def jacobian(self, v, cache=None):
        n = self.model.dim
        x0, _, _, T, lam = self.unpack(v)
        p, _ = self.realize(lam)
        aug = integrate_augmented(self.model, p, x0, T,
                                  self.model.lambda_column(), self.integration)
        flow = self.model.rhs(aug.x_T, p)
        jac = np.zeros((self.n_eq, self.n_free))
        jac[:n, :n] = aug.H_T - np.eye(n)
        jac[:n, n] = flow
        jac[:n, n + 1] = aug.S_T[:, 0]
        jac[n, :n] = _phase_jac_x(self.model, p, x0)
        gx = self.model.metric.grad_x(x0, p)
        jac[n, n + 1] = gx @ self.model.jac_p(x0, p)[:, self.model.lambda_index]
        return jac

    def scale(self, v_seed):
        n = self.model.dim
        w = np.empty(self.n_free)
        w[:n] = max(float(np.abs(v_seed[:n]).max()), 1e-2)
        w[n] = max(abs(v_seed[n]), 1.0)
        w[n + 1] = max(self.lambda_range[1] - self.lambda_range[0], 1e-6)
        return w

    def in_range(self, v):
        lam = v[self.cont_index]
        return self.lambda_range[0] <= lam <= self.lambda_range[1]


class _UncertainProblem(ZeroProblem):
    """Shared machinery for the expansion and propagation problems."""

    mapping: UncertaintyMap

    def __init__(self, model, params, mapping,
                 integration=IntegrationSettings(),
                 continuation=ContinuationSettings()):
        self.model = model
        self.params = params
        self.mapping = mapping
        self.integration = integration
        self.continuation = continuation

    # subclasses define: unpack, pack, col_* index attributes

    def _evaluate(self, x0, eps, r, T, lam, with_lambda_col):
        model = self.model
        p0 = self.params.with_lambda(lam)
        p = self.mapping.realize(p0, eps)
        dp_deps = self.mapping.dp_deps(p0)
        cols = np.hstack([dp_deps, model.lambda_column()]) if with_lambda_col else dp_deps
        aug = integrate_augmented(model, p, x0, T, cols, self.integration)
        flow = model.rhs(aug.x_T, p)
        sens, grad = uncertainty_gradient(
            model, p, x0, aug.H_T, aug.S_T, flow, dp_deps,
            self.continuation.cond_limit,
        )
        m = self.mapping.m
        res = np.empty(self.n_eq)
        n = model.dim
        res[:n] = aug.x_T - x0
        res[n] = sphere_residual(eps, r)
        res[n + 1] = phase_residual(model, p, x0)
        nrm = float(np.linalg.norm(eps))
        if m > 1:
            if nrm > 1e-12:
                res[n + 2:] = sphere_tangent_basis(eps) @ grad
            else:
                # degenerate origin: extremal block defined as satisfied
                res[n + 2:] = 0.0
        return res, _EvalCache(p=p, aug=aug, flow=flow, dp_deps=dp_deps,
                               grad_eps=grad, sens=sens)

    def _leps_value(self, x0, eps, r, T, lam):
        model = self.model
        p0 = self.params.with_lambda(lam)
        p = self.mapping.realize(p0, eps)
        dp_deps = self.mapping.dp_deps(p0)
        aug = integrate_augmented(model, p, x0, T, dp_deps, self.integration)
        flow = model.rhs(aug.x_T, p)
        _, grad = uncertainty_gradient(
            model, p, x0, aug.H_T, aug.S_T, flow, dp_deps,
            self.continuation.cond_limit,
        )
        return sphere_tangent_basis(eps) @ grad

    def _jacobian_uq(self, v, cache, cols):
        """Analytic rows for recurrence/sphere/phase; differenced extremal row.

        ``cols`` maps variable roles to column indices (None when frozen).
        """
        model = self.model
        n = model.dim
        m = self.mapping.m
        x0, eps, r, T, lam = self.unpack(v)
        if cache is None or cache.aug is None:
            _, cache = self.residual(v)
        aug, p = cache.aug, cache.p
        jac = np.zeros((self.n_eq, self.n_free))
        cx, ce, cr, ct, cl = cols

        jac[:n, cx] = aug.H_T - np.eye(n)
        jac[:n, ce] = aug.S_T[:, :m]
        jac[:n, ct] = cache.flow
        if cl is not None:
            jac[:n, cl] = aug.S_T[:, m]

        jac[n, ce] = 2.0 * eps
        if cr is not None:
            jac[n, cr] = -2.0 * r

        jac[n + 1, cx] = _phase_jac_x(model, p, x0)
        gx = model.metric.grad_x(x0, p)
        gj = gx @ model.jac_p(x0, p)
        jac[n + 1, ce] = gj @ cache.dp_deps
        if cl is not None:
            jac[n + 1, cl] = gj[model.lambda_index]

        if m > 1:
            fd = self.continuation.fd_step
            free_cols = list(cx) + list(ce) + [ct] + ([cl] if cl is not None else [])
            for j in free_cols:
                d = fd * (1.0 + abs(v[j]))
                vp = v.copy()
                vp[j] += d
                vm = v.copy()
                vm[j] -= d
                xp, ep, rp, tp, lp = self.unpack(vp)
                xm, em, rm, tm, lm = self.unpack(vm)
                lep = self._leps_value(xp, ep, rp, tp, lp)
                lem = self._leps_value(xm, em, rm, tm, lm)
                jac[n + 2:, j] = (lep - lem) / (2.0 * d)
        return jac


class ExpandProblem(_UncertainProblem):
    """Uncertainty expansion: free (x0, eps, r, T) at frozen lambda."""

    def __init__(self, model, params, mapping, lambda_frozen, r_range=(0.0, np.inf),
                 integration=IntegrationSettings(),
                 continuation=ContinuationSettings()):
        super().__init__(model, params, mapping, integration, continuation)
        self.lambda_frozen = float(lambda_frozen)
        self.r_range = (float(r_range[0]), float(r_range[1]))
        n, m = model.dim, mapping.m
        self.n_free = n + m + 2
        self.n_eq = n + m + 1
        self.cont_index = n + m

    def pack(self, x0, eps, r, T):
        return np.concatenate([np.asarray(x0, dtype=float),
                               np.asarray(eps, dtype=float),
                               [float(r), float(T)]])

    def unpack(self, v):
        n, m = self.model.dim, self.mapping.m
        return v[:n], v[n:n + m], float(v[n + m]), float(v[n + m + 1]), self.lambda_frozen

    def residual(self, v):
        x0, eps, r, T, lam = self.unpack(v)
        return self._evaluate(x0, eps, r, T, lam, with_lambda_col=False)

    def jacobian(self, v, cache=None):
        n, m = self.model.dim, self.mapping.m
        cols = (range(n), range(n, n + m), n + m, n + m + 1, None)
        return self._jacobian_uq(v, cache, cols)

    def scale(self, v_seed):
        n, m = self.model.dim, self.mapping.m
        w = np.empty(self.n_free)
        w[:n] = max(float(np.abs(v_seed[:n]).max()), 1e-2)
        we = max(self.r_range[1] if np.isfinite(self.r_range[1]) else 0.0,
                 abs(v_seed[n + m]), 1e-3)
        w[n:n + m] = we
        w[n + m] = we
        w[n + m + 1] = max(abs(v_seed[n + m + 1]), 1.0)
        return w

    def in_range(self, v):
        r = v[self.cont_index]
        return self.r_range[0] <= r <= self.r_range[1]


class PropagateProblem(_UncertainProblem):
    """Uncertainty propagation: free (x0, eps, T, lambda) at frozen level."""

    def __init__(self, model, params, mapping, r_frozen, lambda_range,
                 integration=IntegrationSettings(),
                 continuation=ContinuationSettings()):
        super().__init__(model, params, mapping, integration, continuation)
        self.r_frozen = float(r_frozen)
        self.lambda_range = (float(lambda_range[0]), float(lambda_range[1]))
        n, m = model.dim, mapping.m
        self.n_free = n + m + 2
        self.n_eq = n + m + 1
        self.cont_index = n + m + 1

    def pack(self, x0, eps, T, lam):
        return np.concatenate([np.asarray(x0, dtype=float),
                               np.asarray(eps, dtype=float),
                               [float(T), float(lam)]])

    def unpack(self, v):
        n, m = self.model.dim, self.mapping.m
        return v[:n], v[n:n + m], self.r_frozen, float(v[n + m]), float(v[n + m + 1])

    def residual(self, v):
        x0, eps, r, T, lam = self.unpack(v)
        return self._evaluate(x0, eps, r, T, lam, with_lambda_col=True)

    def jacobian(self, v, cache=None):
        n, m = self.model.dim, self.mapping.m
        cols = (range(n), range(n, n + m), None, n + m, n + m + 1)
        return self._jacobian_uq(v, cache, cols)

    def scale(self, v_seed):
        n, m = self.model.dim, self.mapping.m
        w = np.empty(self.n_free)
        w[:n] = max(float(np.abs(v_seed[:n]).max()), 1e-2)
        w[n:n + m] = max(self.r_frozen, 1e-3)
        w[n + m] = max(abs(v_seed[n + m]), 1.0)
        w[n + m + 1] = max(self.lambda_range[1] - self.lambda_range[0], 1e-6)
        return w

    def in_range(self, v):
        lam = v[self.cont_index]
        return self.lambda_range[0] <= lam <= self.lambda_range[1]


# ---------------------------------------------------------------------------
# Predictor-corrector core


def tangent(problem: ZeroProblem, v: np.ndarray, jac: np.ndarray,
            w: np.ndarray, prev: np.ndarray | None = None) -> np.ndarray:
    """Unit null vector of the scaled Jacobian at v.

    One component is pinned to 1 (the largest-magnitude entry of the previous
    tangent, else the continuation parameter), the determined system is
    solved, and the result is normalized and oriented along ``prev``.
    """
    js = jac * w[None, :]
    k = problem.cont_index if prev is None else int(np.argmax(np.abs(prev)))
    cols = [j for j in range(problem.n_free) if j != k]
    sub = js[:, cols]
    rhs = -js[:, k]
    try:
        sol = np.linalg.solve(sub, rhs)
    except np.linalg.LinAlgError:
        raise ConvergenceError("degenerate tangent (singular pinned system)")
    if not np.all(np.isfinite(sol)) or np.abs(sol).max() > 1e12:
        raise ConvergenceError("degenerate tangent (unbounded null vector)")
    delta = np.empty(problem.n_free)
    delta[k] = 1.0
    for idx, j in enumerate(cols):
        delta[j] = sol[idx]
    delta /= np.linalg.norm(delta)
    if prev is not None and float(delta @ prev) < 0.0:
        delta = -delta
    return delta


def _orient_first(delta: np.ndarray, cont_index: int, direction: int) -> np.ndarray:
    ref = delta[cont_index]
    if abs(ref) < 1e-12:
        ref = delta[int(np.argmax(np.abs(delta)))]
    if ref * direction < 0:
        return -delta
    return delta


def predict_correct(problem: ZeroProblem, v: np.ndarray, delta: np.ndarray,
                    h: float, w: np.ndarray, jac0: np.ndarray,
                    res_scale: float = 1.0):
    """One predictor step of size h plus orthogonally-constrained correction.

    The corrector reuses ``jac0`` (evaluated at v) and refreshes it when the
    residual norm contracts poorly.  Returns (v_new, cache, norm, n_iter) or
    raises ConvergenceError.
    """
    cs = problem.continuation
    v_pred = v + h * (w * delta)
    vk = v_pred.copy()
    jac = jac0
    refreshed = False
    prev_norm = np.inf
    for it in range(cs.max_newton):
        res, cache = problem.residual(vk)
        orth = float(delta @ ((vk - v_pred) / w))
        norm = max(float(np.abs(res).max()) / res_scale, abs(orth))
        if norm < cs.newton_tol:
            return vk, cache, norm, it
        if it == 0 and problem.cheap_jacobian:
            jac = problem.jacobian(vk, cache)
            refreshed = True
        elif norm > 0.7 * prev_norm and it > 0:
            if refreshed or norm > 1e3 * res_scale:
                raise ConvergenceError("corrector diverged", residual_norm=norm)
            jac = problem.jacobian(vk, cache)
            refreshed = True
        prev_norm = norm
        mat = np.empty((problem.n_free, problem.n_free))
        mat[:problem.n_eq, :] = jac * w[None, :]
        mat[problem.n_eq, :] = delta
        rhs = np.empty(problem.n_free)
        rhs[:problem.n_eq] = -res
        rhs[problem.n_eq] = -orth
        try:
            du = np.linalg.solve(mat, rhs)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular corrector matrix")
        vk = vk + w * du
    raise ConvergenceError("corrector iteration budget exhausted",
                           residual_norm=prev_norm)


def _solve_pinned(problem: ZeroProblem, v_guess: np.ndarray, pin_index: int,
                  pin_value: float, max_iter: int = 20):
    """Damped Newton on the determined system with one variable pinned.

    Used to initialize the expansion and to land exactly on level crossings.
    """
    cs = problem.continuation
    v = v_guess.copy()
    v[pin_index] = pin_value
    cols = [j for j in range(problem.n_free) if j != pin_index]
    res, cache = problem.residual(v)
    res_scale = problem.residual_scale(v)
    norm = float(np.abs(res).max()) / res_scale
    for _ in range(max_iter):
        if norm < cs.newton_tol:
            return v, cache, norm
        jac = problem.jacobian(v, cache)[:, cols]
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError:
            raise ConvergenceError("singular pinned-system Jacobian")
        lam = 1.0
        for _ in range(5):
            vn = v.copy()
            vn[cols] += lam * step
            res_n, cache_n = problem.residual(vn)
            norm_n = float(np.abs(res_n).max()) / res_scale
            if norm_n < norm or lam <= 1 / 16:
                break
            lam *= 0.5
        v, res, cache, norm = vn, res_n, cache_n, norm_n
    if norm >= cs.newton_tol:
        raise ConvergenceError(f"pinned solve stalled (norm {norm:.3e})",
                               residual_norm=norm)
    return v, cache, norm


def _point_from_v(problem: ZeroProblem, v, delta, norm, index) -> ContinuationPoint:
    x0, eps, r, T, lam = problem.unpack(v)
    p0 = problem.params.with_lambda(lam)
    if getattr(problem, "mapping", None) is not None:
        p = problem.mapping.realize(p0, eps)
    else:
        p = p0
    return ContinuationPoint(
        x0=np.array(x0, dtype=float, copy=True),
        eps=np.array(eps, dtype=float, copy=True),
        r=r, T=T, lam=lam,
        tangent=np.array(delta, dtype=float, copy=True),
        metric_value=float(problem.model.metric.value(np.asarray(x0, dtype=float), p)),
        residual_norm=norm,
        step_index=index,
    )


def _seg_point_dist(a: np.ndarray, b: np.ndarray, q: np.ndarray) -> float:
    """Distance from point q to segment [a, b]."""
    ab = b - a
    denom = float(ab @ ab)
    if denom <= 0.0:
        return float(np.linalg.norm(q - a))
    t = float(np.clip((q - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(q - (a + t * ab)))


def continue_branch(
    problem: ZeroProblem,
    v_start: np.ndarray,
    direction: int = +1,
    crossing_level: float | None = None,
    detect_loop: bool = False,
) -> tuple[Branch, list[np.ndarray]] | Branch:
    """Trace one solution branch from a converged starting point.

    Steps grow by the configured factor after easy corrections and halve on
    corrector failure; folds in the continuation parameter are traversed.
    Termination: parameter range exit, step budget, step underflow, a
    degenerate tangent, or (when ``detect_loop``) return to the start point.

    When ``crossing_level`` is given, every transversal crossing of the
    continuation parameter through that level is refined by a pinned Newton
    solve; the refined vectors are returned alongside the branch.
    """
    cs = problem.continuation
    res0, cache0 = problem.residual(v_start)
    res_scale = problem.residual_scale(v_start)
    norm0 = float(np.abs(res0).max()) / res_scale
    if norm0 > 10 * cs.newton_tol:
        raise ConvergenceError(f"branch start does not satisfy the zero problem "
                               f"(norm {norm0:.3e})", residual_norm=norm0)
    w = problem.scale(v_start)
    jac = problem.jacobian(v_start, cache0)
    try:
        delta = tangent(problem, v_start, jac, w, prev=None)
    except ConvergenceError:
        pt = _point_from_v(problem, v_start, np.zeros(problem.n_free), norm0, 0)
        branch = Branch(points=[pt], termination=DEGENERATE_TANGENT)
        return (branch, []) if crossing_level is not None else branch
    delta = _orient_first(delta, problem.cont_index, direction)

    points = [_point_from_v(problem, v_start, delta, norm0, 0)]
    crossings: list[np.ndarray] = []
    skipped = 0
    v = v_start
    u_seed = v_start / w
    h = cs.h_init
    arc = 0.0
    recent = []  # scaled step sizes, for stall detection near singular endpoints
    termination = MAX_STEPS
    n_new = 0
    cap_lam = np.isfinite(cs.max_dlam)
    cap_met = np.isfinite(cs.max_dmetric)
    met_prev = problem.metric_of(v) if cap_met else 0.0
    met_new = met_prev
    while n_new < cs.max_steps:
        halvings = 0
        accepted = False
        while not accepted:
            try:
                v_new, cache_new, norm, n_iter = predict_correct(
                    problem, v, delta, h, w, jac, res_scale)
            except _STEP_ERRORS:
                halvings += 1
                h *= 0.5
                if halvings > cs.max_halvings or h < cs.h_min:
                    termination = STEP_UNDERFLOW
                    break
                continue
            # projection caps keep the stored polyline plot-resolved
            if cap_lam or cap_met:
                met_new = problem.metric_of(v_new) if cap_met else 0.0
                d_lam = abs(v_new[problem.cont_index] - v[problem.cont_index])
                d_met = abs(met_new - met_prev) if cap_met else 0.0
                if (((cap_lam and d_lam > cs.max_dlam)
                     or (cap_met and d_met > cs.max_dmetric))
                        and h > 2 * cs.h_min and halvings <= 3 * cs.max_halvings):
                    halvings += 1
                    h *= 0.5
                    continue
            accepted = True
        if termination == STEP_UNDERFLOW:
            break
        met_prev = met_new
        n_new += 1
        chord = float(np.linalg.norm((v_new - v) / w))
        arc += chord
        recent.append(chord)
        if len(recent) > 25:
            recent.pop(0)
            if sum(recent) < 50 * cs.h_min:
                # asymptotic creep toward a singular endpoint
                points.append(_point_from_v(problem, v_new, delta, norm, n_new))
                termination = STEP_UNDERFLOW
                break

        if crossing_level is not None:
            c_prev = v[problem.cont_index]
            c_new = v_new[problem.cont_index]
            if (c_prev - crossing_level) * (c_new - crossing_level) < 0.0:
                theta = (crossing_level - c_prev) / (c_new - c_prev)
                guess = v + theta * (v_new - v)
                try:
                    vc, cc, nc = _solve_pinned(problem, guess,
                                               problem.cont_index, crossing_level)
                    crossings.append(vc)
                except _STEP_ERRORS:
                    skipped += 1
            elif abs(c_new - crossing_level) < 1e-13 * max(1.0, abs(crossing_level)):
                crossings.append(v_new.copy())

        if detect_loop and arc > cs.loop_arc_factor * cs.h_init:
            d = _seg_point_dist(v / w, v_new / w, u_seed)
            if d < cs.loop_tol:
                points.append(_point_from_v(problem, v_new, delta, norm, n_new))
                termination = CLOSED_LOOP
                break

        try:
            jac_new = problem.jacobian(v_new, cache_new)
            delta_new = tangent(problem, v_new, jac_new, w, prev=delta)
        except ConvergenceError:
            points.append(_point_from_v(problem, v_new, delta, norm, n_new))
            termination = DEGENERATE_TANGENT
            break
        points.append(_point_from_v(problem, v_new, delta_new, norm, n_new))
        v, jac, delta = v_new, jac_new, delta_new
        if not problem.in_range(v_new):
            termination = RANGE_EXIT
            break
        if n_iter <= cs.easy_iters:
            h = min(h * cs.grow, cs.h_max)
    branch = Branch(points=points, termination=termination)
    branch.provenance["skipped_crossings"] = skipped
    if crossing_level is not None:
        return branch, crossings
    return branch


# ---------------------------------------------------------------------------
# Drivers


def expand_uncertainty(
    model: SystemModel,
    params: ReferenceParameters,
    mapping: UncertaintyMap,
    ref_orbit: PeriodicOrbit,
    R: float,
    both_signs: bool = True,
    integration: IntegrationSettings = IntegrationSettings(),
    continuation: ContinuationSettings = ContinuationSettings(),
    r0_factor: float = 1e-3,
    overshoot: float = 2.0,
    seed_orbit_index: int = 0,
) -> ExpansionResult:
    """Trace extremal solutions as the uncertainty level grows from zero.

    Initialization seeds the uncertainty along +/- the metric's uncertainty
    gradient at a small level r0 = r0_factor * R and solves the determined
    system by Newton from the reference solution.  Continuation then runs in
    arc length with the level as nominal parameter up to ``overshoot * R``,
    traversing folds; every transversal crossing of the marginal level R is
    recorded (multiple crossings seed detached margins).
    """
    lam = params.lam
    if R < 0:
        raise ValueError("R must be nonnegative")
    if R == 0.0:
        pt = ContinuationPoint(
            x0=ref_orbit.x0.copy(), eps=np.zeros(mapping.m), r=0.0,
            T=ref_orbit.T, lam=lam, tangent=np.zeros(model.dim + mapping.m + 2),
            metric_value=ref_orbit.metric_value,
            residual_norm=ref_orbit.residual_norm,
        )
        fams = ("+", "-") if both_signs else ("+",)
        return ExpansionResult(
            marginal_points=[MarginalPoint(pt, f, lam, 0, seed_orbit_index) for f in fams],
            branches=[],
        )

    dp_deps = mapping.dp_deps(params.values)
    aug = integrate_augmented(model, ref_orbit.p, ref_orbit.x0, ref_orbit.T,
                              dp_deps, integration)
    flow = model.rhs(aug.x_T, ref_orbit.p)
    _, grad0 = uncertainty_gradient(model, ref_orbit.p, ref_orbit.x0,
                                    aug.H_T, aug.S_T, flow, dp_deps,
                                    continuation.cond_limit)
    gnorm = float(np.linalg.norm(grad0))
    if gnorm < 1e-12:
        raise MetricInsensitiveError(
            f"metric locally insensitive to uncertainty (|grad| = {gnorm:.3e})")

    r0 = r0_factor * R
    r_stop = overshoot * R
    signs = (+1.0, -1.0) if both_signs else (+1.0,)
    marginal: list[MarginalPoint] = []
    branches: list[Branch] = []
    skipped = 0
    for sign in signs:
        family = "+" if sign > 0 else "-"
        problem = ExpandProblem(
            model, params, mapping, lambda_frozen=lam,
            r_range=(0.0, r_stop), integration=integration,
            continuation=continuation,
        )
        eps_seed = sign * r0 * grad0 / gnorm
        v_guess = problem.pack(ref_orbit.x0, eps_seed, r0, ref_orbit.T)
        try:
            v0, _, _ = _solve_pinned(problem, v_guess, problem.cont_index, r0)
        except (ConvergenceError, NearBifurcationError) as exc:
            raise ConvergenceError(
                f"expansion initialization failed for family {family} at "
                f"lambda = {lam:.6g} (grad_eps = {grad0}): {exc}") from exc
        branch, crossings = continue_branch(
            problem, v0, direction=+1, crossing_level=R)
        branch.family = family
        branch.provenance.update(seed_lambda=lam, driver="expand", R=R,
                                 seed_orbit_index=seed_orbit_index)
        skipped += branch.provenance.get("skipped_crossings", 0)
        branches.append(branch)
        for ci, vc in enumerate(crossings):
            res, cache = problem.residual(vc)
            nrm = float(np.abs(res).max())
            pt = _point_from_v(problem, vc, np.zeros(problem.n_free), nrm, ci)
            marginal.append(MarginalPoint(pt, family, lam, ci, seed_orbit_index))
    return ExpansionResult(marginal_points=marginal, branches=branches,
                           skipped_crossings=skipped)


def propagate_margins(
    model: SystemModel,
    params: ReferenceParameters,
    mapping: UncertaintyMap,
    marginal_points: list[MarginalPoint],
    lambda_range: tuple[float, float],
    R: float,
    integration: IntegrationSettings = IntegrationSettings(),
    continuation: ContinuationSettings = ContinuationSettings(),
) -> list[Branch]:
    """Continue each marginal point over the bifurcation parameter at fixed R.

    Both parameter directions are traced and merged unless the forward run
    already closes into a loop.  Branches of the same family sharing any point
    within the dedup tolerance are reported once (first seed wins).
    """
    branches: list[Branch] = []
    for mp in marginal_points:
        problem = PropagateProblem(
            model, params, mapping, r_frozen=R, lambda_range=lambda_range,
            integration=integration, continuation=continuation,
        )
        v_seed = problem.pack(mp.point.x0, mp.point.eps, mp.point.T, mp.point.lam)
        fwd = continue_branch(problem, v_seed, direction=+1, detect_loop=True)
        if fwd.termination == CLOSED_LOOP:
            merged = fwd
            merged.termination_backward = None
        else:
            bwd = continue_branch(problem, v_seed, direction=-1, detect_loop=True)
            back = list(reversed(bwd.points[1:]))
            for pt in back:
                pt.tangent = -pt.tangent
            pts = back + fwd.points
            for i, pt in enumerate(pts):
                pt.step_index = i
            merged = Branch(points=pts, termination=fwd.termination,
                            termination_backward=bwd.termination)
        merged.family = mp.family
        merged.provenance.update(
            driver="propagate", R=R, seed_lambda=mp.seed_lambda,
            crossing_index=mp.crossing_index,
            seed_orbit_index=mp.seed_orbit_index,
        )
        branches.append(merged)
    return dedup_branches(branches, model, mapping, lambda_range, R,
                          continuation.dedup_tol)


def _branch_matrix(branch: Branch, w: np.ndarray) -> np.ndarray:
    rows = [np.concatenate([pt.x0, pt.eps, [pt.T, pt.lam]]) / w for pt in branch.points]
    return np.array(rows)


def dedup_branches(branches, model, mapping, lambda_range, R, tol) -> list[Branch]:
    """Drop later branches that share any point with an earlier same-family one."""
    m = mapping.m if mapping is not None else 0
    lam_mid = 0.5 * (lambda_range[0] + lambda_range[1])
    w = np.empty(model.dim + m + 2)
    w[:model.dim] = 1.0
    if m:
        w[model.dim:model.dim + m] = max(R, 1e-3)
    w[model.dim + m] = 2.0 * np.pi / max(abs(lam_mid), 1e-6)
    w[model.dim + m + 1] = max(lambda_range[1] - lambda_range[0], 1e-6)
    kept: list[Branch] = []
    kept_mats: list[np.ndarray] = []
    for br in branches:
        mat = _branch_matrix(br, w)
        dup = False
        for other, omat in zip(kept, kept_mats):
            if other.family != br.family:
                continue
            d2 = ((mat[:, None, :] - omat[None, :, :]) ** 2).sum(axis=2)
            if d2.min() < tol * tol:
                dup = True
                break
        if not dup:
            kept.append(br)
            kept_mats.append(mat)
    return kept


def locate_critical_level(
    loop_predicate: Callable[[float], bool],
    R_lo: float,
    R_hi: float,
    tol: float,
) -> tuple[float, list[tuple[float, bool]]]:
    """Bisect on the uncertainty level for the appearance of a closed loop.

    ``loop_predicate(R)`` must run the full expansion-plus-propagation cycle
    and report whether any margin branch closes into a loop.  Requires the
    loop absent at R_lo and present at R_hi; returns the bracket midpoint once
    the bracket is narrower than ``tol`` along with all probed levels.
    """
    if not R_lo < R_hi:
        raise BracketError("need R_lo < R_hi")
    probes: list[tuple[float, bool]] = []
    lo_val = loop_predicate(R_lo)
    probes.append((R_lo, lo_val))
    if lo_val:
        raise BracketError(f"loop already present at R_lo = {R_lo}")
    hi_val = loop_predicate(R_hi)
    probes.append((R_hi, hi_val))
    if not hi_val:
        raise BracketError(f"loop absent at R_hi = {R_hi}")
    lo, hi = R_lo, R_hi
    while hi - lo >= tol:
        mid = 0.5 * (lo + hi)
        val = loop_predicate(mid)
        probes.append((mid, val))
        if val:
            hi = mid
        else:
            lo = mid
    return 0.5 * (lo + hi), probes
