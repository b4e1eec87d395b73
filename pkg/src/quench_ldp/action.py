"""Large-deviations action on discretized slow paths, and its minimization.

The exponential decay rate of rare slow-motion events is the quadratic
path functional::

    S(phi) = 0.5 * int_0^T (phid - r(phi))^T q(phi)^{-1} (phid - r(phi)) dt

evaluated here on piecewise-linear paths with uniform time knots (midpoint
rule per segment, exact for constant coefficients).  Minimizers over
endpoint or half-space constraints provide both the decay-rate estimate
and the reference path tracked by the importance-sampling control.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize as _scipy_minimize

from .effective import EffectiveCoefficients


@dataclass(frozen=True)
class EndpointEvent:
    """Paths pinned to phi(T) = target."""

    target: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "target", np.atleast_1d(np.asarray(self.target, float)))


@dataclass(frozen=True)
class HalfSpaceEvent:
    """Paths with normal . phi(T) >= level; level = -inf is the whole space."""

    normal: np.ndarray
    level: float

    def __post_init__(self):
        object.__setattr__(self, "normal", np.atleast_1d(np.asarray(self.normal, float)))
        if not np.any(self.normal):
            raise ValueError("half-space normal must be nonzero")

    def indicator(self, x_final: np.ndarray) -> np.ndarray:
        return (x_final @ self.normal >= self.level).astype(float)


@dataclass(frozen=True)
class DiscretePath:
    """Piecewise-linear path: uniform time knots on [0, T]."""

    times: np.ndarray
    knots: np.ndarray  # (n_seg + 1, m)

    def __post_init__(self):
        t = np.asarray(self.times, float)
        k = np.atleast_2d(np.asarray(self.knots, float))
        if k.shape[0] != t.shape[0]:
            raise ValueError("times and knots must have matching lengths")
        if t.shape[0] < 2 or np.any(np.diff(t) <= 0):
            raise ValueError("need at least two strictly increasing times")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "knots", k)

    @classmethod
    def line(cls, x0, x1, T: float, n_seg: int) -> "DiscretePath":
        t = np.linspace(0.0, T, n_seg + 1)
        x0 = np.atleast_1d(np.asarray(x0, float))
        x1 = np.atleast_1d(np.asarray(x1, float))
        lam = (t / T)[:, None]
        return cls(t, (1 - lam) * x0 + lam * x1)

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def n_seg(self) -> int:
        return len(self.times) - 1

    @property
    def velocities(self) -> np.ndarray:
        return np.diff(self.knots, axis=0) / np.diff(self.times)[:, None]

    def velocity_at(self, t) -> np.ndarray:
        """Per-segment constant velocity; clamps outside [0, T]."""
        i = np.clip(np.searchsorted(self.times, t, side="right") - 1, 0, self.n_seg - 1)
        return self.velocities[i]

    def position_at(self, t) -> np.ndarray:
        t = np.clip(t, self.times[0], self.times[-1])
        out = np.empty((np.size(t), self.knots.shape[1]))
        for d in range(self.knots.shape[1]):
            out[:, d] = np.interp(t, self.times, self.knots[:, d])
        return out[0] if np.ndim(t) == 0 else out


@dataclass
class ActionValue:
    total: float
    per_segment: np.ndarray
    gradient: np.ndarray | None = None  # knot gradient, shape (n_seg + 1, m)


def local_rate(x, v, eff: EffectiveCoefficients) -> float:
    """Instantaneous cost 0.5 (v - r(x))^T q(x)^{-1} (v - r(x))."""
    x = np.atleast_1d(np.asarray(x, float))
    v = np.atleast_1d(np.asarray(v, float))
    w = v - eff.r(x)
    return float(0.5 * w @ eff.q_solve(x, w))


def path_action(path: DiscretePath, eff: EffectiveCoefficients,
                *, with_gradient: bool = False) -> ActionValue:
    """Midpoint-rule action of a piecewise-linear path.

    Per segment the local rate is evaluated at the midpoint state with the
    constant segment velocity, then weighted by the segment length.  The
    optional gradient with respect to every knot (endpoints included) is
    assembled analytically from the same interpolated coefficients, so it
    matches finite differences of this functional to rounding accuracy.
    """
    knots = path.knots
    dts = np.diff(path.times)
    mids = 0.5 * (knots[:-1] + knots[1:])
    vels = np.diff(knots, axis=0) / dts[:, None]
    r = eff.r(mids)                      # (S, m)
    w = vels - r
    q = eff.q(mids)                      # (S, m, m)
    u = np.linalg.solve(q, w[..., None])[..., 0]  # q^{-1} w
    per_seg = 0.5 * np.einsum("sm,sm->s", w, u) * dts
    total = float(per_seg.sum())
    if not with_gradient:
        return ActionValue(total, per_seg)

    jr = eff.drift_jacobian(mids)        # (S, m, m), axis -2 is d/dx
    dq = eff.diffusion_derivative(mids)  # (S, m, m, m), first value axis d/dx
    # d local / d x_j = -u . (dr/dx_j) - 0.5 u^T (dq/dx_j) u
    dldx = -np.einsum("sjm,sm->sj", jr, u) - 0.5 * np.einsum(
        "sjml,sm,sl->sj", dq, u, u
    )
    grad = np.zeros_like(knots)
    # Midpoint chain rule: each segment touches its two bounding knots.
    grad[:-1] += 0.5 * dldx * dts[:, None] - u
    grad[1:] += 0.5 * dldx * dts[:, None] + u
    return ActionValue(total, per_seg, grad)


def drift_path(x0, T: float, n_seg: int, eff: EffectiveCoefficients,
               *, n_fixed_point: int = 60) -> DiscretePath:
    """Zero-cost path: implicit-midpoint solve of phid = r(phi).

    Each step solves ``x1 = x0 + dt * r((x0 + x1)/2)`` by fixed point, so
    the segment velocities match the drift at the segment midpoints and the
    discretized action vanishes to rounding.
    """
    t = np.linspace(0.0, T, n_seg + 1)
    knots = np.empty((n_seg + 1, len(np.atleast_1d(x0))))
    knots[0] = np.atleast_1d(np.asarray(x0, float))
    dt = T / n_seg
    for i in range(n_seg):
        x_prev = knots[i]
        x_next = x_prev + dt * eff.r(x_prev)
        for _ in range(n_fixed_point):
            x_new = x_prev + dt * eff.r(0.5 * (x_prev + x_next))
            if np.allclose(x_new, x_next, rtol=0.0, atol=1e-15):
                x_next = x_new
                break
            x_next = x_new
        knots[i + 1] = x_next
    return DiscretePath(t, knots)


@dataclass
class MinimizeResult:
    path: DiscretePath
    value: float
    stationarity: float
    iterations: int
    converged: bool


def _tangent_basis(normal: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the hyperplane normal^perp, shape (m, m-1)."""
    m = len(normal)
    if m == 1:
        return np.zeros((1, 0))
    qmat, _ = np.linalg.qr(
        np.concatenate([normal[:, None], np.eye(m)], axis=1)
    )
    return qmat[:, 1:m]


def minimize_action(
    x0,
    event,
    T: float,
    eff: EffectiveCoefficients,
    n_seg: int = 32,
    *,
    stationarity_tol: float = 1e-8,
    max_iter: int = 2000,
) -> MinimizeResult:
    """Minimize the path action over paths from x0 meeting the event.

    Supported events: :class:`EndpointEvent` (endpoint pinned) and
    :class:`HalfSpaceEvent` (endpoint constrained to the closed half
    space).  Quasi-Newton descent over the interior knots (plus the
    endpoint along the constraint hyperplane for half-space events),
    initialized from the straight line to the endpoint or to the boundary
    projection.  When the drift path already realizes a half-space event
    the zero-cost path is returned directly.

    A result with ``converged=False`` carries the best iterate found; the
    reported ``stationarity`` is the sup norm of the (projected) gradient.
    """
    x0 = np.atleast_1d(np.asarray(x0, float))
    m = len(x0)

    if isinstance(event, HalfSpaceEvent):
        free = drift_path(x0, T, n_seg, eff)
        if float(event.normal @ free.knots[-1]) >= event.level:
            val = path_action(free, eff)
            return MinimizeResult(free, val.total, 0.0, 0, True)
        a = event.normal
        base = x0 + a * (event.level - a @ x0) / (a @ a)
        tangent = _tangent_basis(a)
        init = DiscretePath.line(x0, base, T, n_seg)
        n_tan = tangent.shape[1]
    elif isinstance(event, EndpointEvent):
        init = DiscretePath.line(x0, event.target, T, n_seg)
        tangent = None
        n_tan = 0
    else:
        raise TypeError(f"unsupported event {type(event).__name__}")

    times = init.times
    interior = init.knots[1:-1]
    endpoint = init.knots[-1]

    def unpack(theta):
        knots = np.empty((n_seg + 1, m))
        knots[0] = x0
        knots[1:-1] = theta[: (n_seg - 1) * m].reshape(n_seg - 1, m)
        if tangent is not None and n_tan:
            knots[-1] = base + tangent @ theta[(n_seg - 1) * m:]
        else:
            knots[-1] = endpoint
        return knots

    def objective(theta):
        knots = unpack(theta)
        val = path_action(DiscretePath(times, knots), eff, with_gradient=True)
        g_int = val.gradient[1:-1].reshape(-1)
        if tangent is not None and n_tan:
            g = np.concatenate([g_int, tangent.T @ val.gradient[-1]])
        else:
            g = g_int
        return val.total, g

    theta0 = interior.reshape(-1)
    if tangent is not None and n_tan:
        theta0 = np.concatenate([theta0, np.zeros(n_tan)])

    if theta0.size == 0:
        # Single segment with pinned endpoint: nothing to optimize.
        knots = unpack(theta0)
        best = DiscretePath(times, knots)
        return MinimizeResult(best, path_action(best, eff).total, 0.0, 0, True)

    res = _scipy_minimize(
        objective, theta0, jac=True, method="L-BFGS-B",
        options={"maxiter": max_iter, "ftol": 1e-18, "gtol": 1e-12,
                 "maxcor": 30},
    )
    knots = unpack(res.x)
    best = DiscretePath(times, knots)
    value, grad = objective(res.x)
    stationarity = float(np.abs(grad).max()) if grad.size else 0.0
    converged = stationarity <= stationarity_tol
    if not converged:
        warnings.warn(
            f"action minimizer stalled at stationarity {stationarity:.2e} "
            f"after {res.nit} iterations; returning best iterate",
            RuntimeWarning,
            stacklevel=2,
        )
    return MinimizeResult(best, float(value), stationarity, int(res.nit), converged)
