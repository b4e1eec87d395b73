"""Homogenized drift and diffusion of the slow motion.

The fast dynamics averages out against its invariant law, corrected by the
limit of the cell-problem gradients.  Writing ``xi`` for that limit field,
the slow motion behaves on order-one scales like a diffusion with drift
and covariance::

    r(x) = < c(x, .) + xi g(x, .) >_pi
    q(x) = < (sigma + xi tau1)(sigma + xi tau1)^T + (xi tau2)(xi tau2)^T >_pi

Both are evaluated by torus quadrature on the corrector grid and tabulated
over a user-chosen x grid with piecewise-linear interpolation (pointwise
formulas, so tabulation is the implementable representation).  Constant
configurations collapse to a single exact evaluation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .corrector import CorrectorField
from .grids import torus_points
from .medium import CoefficientSet, MediumSample, invariant_density


class DiffusionNotSPDError(RuntimeError):
    """Effective diffusion failed its positive-definiteness floor."""


def _pi_weights(sample: MediumSample, coeffs: CoefficientSet, n_grid: int, fast_dim: int):
    dens = invariant_density(sample, coeffs, n_grid=n_grid)
    pts = torus_points(n_grid, fast_dim)
    w = dens.m_tilde(pts)
    return pts, w / w.sum()


def _grad_values(corrector: CorrectorField, use_extrapolated: bool, rho: float | None):
    if use_extrapolated:
        vals = corrector.grad_limit
    else:
        key = min(corrector.rho_schedule) if rho is None else rho
        vals = corrector.dchi[key]
    m, df = vals.shape[0], vals.shape[1]
    return vals.reshape(m, df, -1).transpose(2, 0, 1)  # (N, m, df)


def effective_drift(
    sample: MediumSample,
    coeffs: CoefficientSet,
    corrector: CorrectorField,
    x,
    *,
    use_extrapolated: bool = True,
    rho: float | None = None,
) -> np.ndarray:
    """Homogenized drift r(x), a pi-average of ``c + xi g`` at fixed x."""
    n, df = corrector.n_grid, corrector.fast_dim
    pts, w = _pi_weights(sample, coeffs, n, df)
    xb = np.broadcast_to(np.asarray(x, float), (pts.shape[0], coeffs.slow_dim))
    cv = coeffs.c(xb, pts)  # (N, m)
    gv = coeffs.g(xb, pts)  # (N, df)
    xi = _grad_values(corrector, use_extrapolated, rho)  # (N, m, df)
    integrand = cv + np.einsum("nmd,nd->nm", xi, gv)
    return integrand.T @ w


def effective_diffusion(
    sample: MediumSample,
    coeffs: CoefficientSet,
    corrector: CorrectorField,
    x,
    *,
    use_extrapolated: bool = True,
    rho: float | None = None,
    q_floor: float = 1e-10,
) -> np.ndarray:
    """Homogenized diffusion q(x), symmetric positive definite.

    Pi-average of ``(sigma + xi tau1)(sigma + xi tau1)^T + (xi tau2)(xi tau2)^T``,
    symmetrized to rounding level.  Raises :class:`DiffusionNotSPDError`
    when the smallest eigenvalue falls below ``q_floor``, which signals a
    corrector or quadrature failure upstream.
    """
    n, df = corrector.n_grid, corrector.fast_dim
    pts, w = _pi_weights(sample, coeffs, n, df)
    xb = np.broadcast_to(np.asarray(x, float), (pts.shape[0], coeffs.slow_dim))
    sig = coeffs.sigma(xb, pts)  # (N, m, k1)
    t1 = coeffs.tau1(pts)
    t2 = coeffs.tau2(pts)
    xi = _grad_values(corrector, use_extrapolated, rho)  # (N, m, df)
    k1 = sig + np.einsum("nmd,ndk->nmk", xi, np.broadcast_to(t1, (pts.shape[0],) + t1.shape[-2:]))
    integrand = np.einsum("nmk,nlk->nml", k1, k1)
    if coeffs.k2 > 0:
        k2 = np.einsum("nmd,ndk->nmk", xi, np.broadcast_to(t2, (pts.shape[0],) + t2.shape[-2:]))
        integrand = integrand + np.einsum("nmk,nlk->nml", k2, k2)
    q = np.einsum("nml,n->ml", integrand, w)
    q = 0.5 * (q + q.T)
    eig = np.linalg.eigvalsh(q)
    if eig.min() < q_floor:
        raise DiffusionNotSPDError(
            f"effective diffusion eigenvalue {eig.min():.3e} below floor {q_floor:.1e}"
        )
    return q


def assemble_velocity_integrand(
    sample: MediumSample,
    coeffs: CoefficientSet,
    dchi_at_y: np.ndarray,
    x,
    y,
    z1,
    z2,
) -> np.ndarray:
    """Pointwise slow-velocity integrand for given control values.

    ``c + dchi g + sigma z1 + dchi (tau1 z1 + tau2 z2)`` evaluated at one
    (x, y) with the corrector gradient ``dchi_at_y`` of shape (m, dfast).
    Averaging this integrand against an occupation law produces the limit
    velocity of the controlled slow motion.
    """
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    z1 = np.asarray(z1, float)
    z2 = np.asarray(z2, float)
    cv = coeffs.c(x, y)
    gv = coeffs.g(x, y)
    sig = coeffs.sigma(x, y)
    t1 = coeffs.tau1(y)
    t2 = coeffs.tau2(y)
    fast_kick = t1 @ z1 + (t2 @ z2 if coeffs.k2 > 0 else 0.0)
    return cv + dchi_at_y @ (gv + fast_kick) + sig @ z1


class _BoxInterpolator:
    """Piecewise-multilinear interpolation on a box grid with gradients."""

    def __init__(self, axes: list[np.ndarray], values: np.ndarray):
        self.axes = [np.asarray(a, float) for a in axes]
        for a in self.axes:
            if len(a) < 2 or np.any(np.diff(a) <= 0):
                raise ValueError("axes must be strictly increasing, length >= 2")
        self.dim = len(axes)
        self.values = values  # shape (len(a0), ..., len(ad-1)) + value_shape
        self.value_shape = values.shape[self.dim:]

    def _locate(self, x):
        # Outside the grid the edge cell extends linearly, keeping values
        # and gradients consistent for the optimizer.
        cells, weights, widths = [], [], []
        for d, a in enumerate(self.axes):
            i = np.clip(np.searchsorted(a, x[..., d], side="right") - 1, 0, len(a) - 2)
            h = a[i + 1] - a[i]
            t = (x[..., d] - a[i]) / h
            cells.append(i)
            weights.append(t)
            widths.append(h)
        return cells, weights, widths

    def __call__(self, x, *, gradient: bool = False):
        x = np.asarray(x, float)
        batch = x.shape[:-1]
        cells, weights, widths = self._locate(x)
        out = np.zeros(batch + self.value_shape)
        grad = np.zeros(batch + (self.dim,) + self.value_shape) if gradient else None
        extra = (np.s_[...],) + (None,) * len(self.value_shape)
        for corner in range(1 << self.dim):
            idx = []
            w = np.ones(batch)
            for d in range(self.dim):
                hi = corner >> d & 1
                idx.append(cells[d] + hi)
                w = w * (weights[d] if hi else 1.0 - weights[d])
            vals = self.values[tuple(idx)]
            out += w[extra] * vals
            if gradient:
                for d in range(self.dim):
                    hi = corner >> d & 1
                    wd = np.ones(batch)
                    for dd in range(self.dim):
                        if dd == d:
                            continue
                        hj = corner >> dd & 1
                        wd = wd * (weights[dd] if hj else 1.0 - weights[dd])
                    sign = 1.0 if hi else -1.0
                    grad[(np.s_[...], d)] += (sign * wd / widths[d])[extra] * vals
        return (out, grad) if gradient else out


@dataclass
class EffectiveCoefficients:
    """Tabulated homogenized drift and diffusion with interpolation.

    For x-independent configurations the tables are single exact nodes and
    the lookups are constants.  Cholesky factors of q are cached at the
    tabulation nodes; interpolated matrices are factored on demand.
    ``provenance`` records the corrector schedule and grid that produced
    the tables.
    """

    slow_dim: int
    r_const: np.ndarray | None = None
    q_const: np.ndarray | None = None
    x_axes: list | None = None
    r_interp: _BoxInterpolator | None = None
    q_interp: _BoxInterpolator | None = None
    provenance: dict = field(default_factory=dict)
    q_floor: float = 1e-10
    _chol_const: tuple | None = None
    node_cholesky: dict = field(default_factory=dict)

    # -- constructors -------------------------------------------------------

    @classmethod
    def constant(cls, r, q, provenance=None) -> "EffectiveCoefficients":
        r = np.atleast_1d(np.asarray(r, float))
        q = np.atleast_2d(np.asarray(q, float))
        eff = cls(slow_dim=r.shape[0], r_const=r, q_const=q,
                  provenance=provenance or {})
        eff._chol_const = cho_factor(q)
        return eff

    @classmethod
    def from_functions(cls, r_fn, q_fn, x_axes, provenance=None) -> "EffectiveCoefficients":
        """Tabulate callables r(x), q(x) over a box grid (one axis per slow dim)."""
        x_axes = [np.asarray(a, float) for a in x_axes]
        m = len(x_axes)
        grid_shape = tuple(len(a) for a in x_axes)
        r_tab = np.empty(grid_shape + (m,))
        q_tab = np.empty(grid_shape + (m, m))
        chol = {}
        for idx in np.ndindex(*grid_shape):
            x = np.array([x_axes[d][idx[d]] for d in range(m)])
            r_tab[idx] = np.atleast_1d(r_fn(x))
            qv = np.atleast_2d(q_fn(x))
            qv = 0.5 * (qv + qv.T)
            eig = np.linalg.eigvalsh(qv)
            if eig.min() <= 0:
                raise DiffusionNotSPDError(
                    f"tabulated diffusion not SPD at x={x} (min eig {eig.min():.3e})"
                )
            q_tab[idx] = qv
            chol[idx] = cho_factor(qv)
        eff = cls(
            slow_dim=m, x_axes=x_axes,
            r_interp=_BoxInterpolator(x_axes, r_tab),
            q_interp=_BoxInterpolator(x_axes, q_tab),
            provenance=provenance or {},
        )
        eff.node_cholesky = chol
        return eff

    # -- lookups --------------------------------------------------------------

    @property
    def is_constant(self) -> bool:
        return self.r_const is not None

    def r(self, x) -> np.ndarray:
        """Drift lookup, broadcasting over leading axes of x."""
        x = np.asarray(x, float)
        if self.is_constant:
            return np.broadcast_to(self.r_const, x.shape[:-1] + (self.slow_dim,)).copy()
        return self.r_interp(x)

    def q(self, x) -> np.ndarray:
        x = np.asarray(x, float)
        if self.is_constant:
            return np.broadcast_to(
                self.q_const, x.shape[:-1] + (self.slow_dim, self.slow_dim)
            ).copy()
        return self.q_interp(x)

    def drift_jacobian(self, x) -> np.ndarray:
        """d r / d x of the interpolant, shape (..., m, m) with axis -2 = d/dx_d."""
        x = np.asarray(x, float)
        if self.is_constant:
            return np.zeros(x.shape[:-1] + (self.slow_dim, self.slow_dim))
        _, grad = self.r_interp(x, gradient=True)
        return grad

    def diffusion_derivative(self, x) -> np.ndarray:
        """d q / d x of the interpolant, shape (..., m, m, m), first index d/dx_d."""
        x = np.asarray(x, float)
        m = self.slow_dim
        if self.is_constant:
            return np.zeros(x.shape[:-1] + (m, m, m))
        _, grad = self.q_interp(x, gradient=True)
        return grad

    def q_solve(self, x, v) -> np.ndarray:
        """Solve q(x) w = v, batched; uses the cached factor when constant."""
        v = np.asarray(v, float)
        if self.is_constant:
            flat = v.reshape(-1, self.slow_dim)
            out = cho_solve(self._chol_const, flat.T).T
            return out.reshape(v.shape)
        return np.linalg.solve(self.q(x), v[..., None])[..., 0]


def homogenize(
    sample: MediumSample,
    coeffs: CoefficientSet,
    corrector: CorrectorField,
    *,
    x_axes=None,
    use_extrapolated: bool = True,
    rho: float | None = None,
    q_floor: float = 1e-10,
) -> EffectiveCoefficients:
    """Tabulate the homogenized coefficients from an environment and corrector.

    ``x_axes`` (one strictly increasing array per slow dimension) is
    required when any coefficient field depends on x; x-independent
    configurations produce exact constants.  ``use_extrapolated=False``
    switches to the smallest-rho corrector gradient for sensitivity
    studies, at ``rho`` if given.
    """
    provenance = {
        "rho_schedule": list(corrector.rho_schedule),
        "n_grid": corrector.n_grid,
        "extrapolated": bool(use_extrapolated),
        "rho": rho,
    }
    if not coeffs.x_dependent:
        x0 = np.zeros(coeffs.slow_dim)
        r = effective_drift(sample, coeffs, corrector, x0,
                            use_extrapolated=use_extrapolated, rho=rho)
        q = effective_diffusion(sample, coeffs, corrector, x0,
                                use_extrapolated=use_extrapolated, rho=rho,
                                q_floor=q_floor)
        eff = EffectiveCoefficients.constant(r, q, provenance)
        eff.q_floor = q_floor
        return eff
    if x_axes is None:
        raise ValueError("x-dependent coefficients need x_axes for tabulation")
    eff = EffectiveCoefficients.from_functions(
        lambda x: effective_drift(sample, coeffs, corrector, x,
                                  use_extrapolated=use_extrapolated, rho=rho),
        lambda x: effective_diffusion(sample, coeffs, corrector, x,
                                      use_extrapolated=use_extrapolated, rho=rho,
                                      q_floor=q_floor),
        x_axes,
        provenance,
    )
    eff.q_floor = q_floor
    return eff
