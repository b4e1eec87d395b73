"""Numerical checks of the quenched averaging structure.

Three diagnostics probe, at finite scale separation, the limits the rest
of the package relies on:

* window averages of stationary observables along the fast motion settle
  at their pi-average, uniformly over time shifts and realizations, with a
  window ``h = (delta**2/eps)**(1-beta)`` that is long on the fast scale
  yet short on the slow one;
* occupation histograms of (control values, fast position mod 1, time)
  over sliding windows have Lebesgue time marginal by construction and a
  fast marginal close to the invariant law;
* the replica-mean slow path stays near the averaged ODE (drift solution
  for zero control, the tracked reference under a path-tracking control).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import PathSample, ScaleParams, fast_noise_factor, _matvec
from .effective import EffectiveCoefficients
from .grids import torus_points
from .medium import CoefficientSet, MediumSample, compile_observable, invariant_density, pi_average
from .rng import replica_stream

_MODES = ("uncontrolled", "perturbed", "controlled")


@dataclass
class WindowAverages:
    """Per-shift window averages of one observable for one realization."""

    shifts: np.ndarray
    means: np.ndarray      # replica means per shift
    std_errs: np.ndarray
    target: float
    window: float
    mode: str


@dataclass
class ErgodicReport:
    """Window-average table across realizations and time shifts."""

    observable: str
    window: float
    shifts: np.ndarray
    seeds: list[int]
    table: np.ndarray       # (n_media, n_shifts) replica-mean window averages
    std_errs: np.ndarray
    target: float
    max_abs_dev: float
    max_dev_se: float
    mode: str

    def to_dict(self) -> dict:
        return {
            "observable": self.observable,
            "window": self.window,
            "shifts": self.shifts.tolist(),
            "seeds": list(self.seeds),
            "table": self.table.tolist(),
            "std_errs": self.std_errs.tolist(),
            "target": self.target,
            "max_abs_dev": self.max_abs_dev,
            "max_dev_se": self.max_dev_se,
            "mode": self.mode,
        }


def ergodic_average(
    sample: MediumSample,
    coeffs: CoefficientSet,
    scale: ScaleParams,
    psi_terms,
    t_shifts,
    mode: str = "uncontrolled",
    *,
    x_frozen=None,
    control=None,
    n_replicas: int = 16,
    seed: int = 0,
    beta: float = 0.5,
    n_grid: int | None = None,
) -> WindowAverages:
    """Window averages of a stationary observable along the fast motion.

    Integrates the fast component alone (the slow state frozen at
    ``x_frozen``) with the mode-dependent drift: bare relaxation,
    perturbed by the coupling drift ``g/delta``, or additionally carrying
    a bounded control ``kappa(y) u(t) / delta``.  For every requested
    shift the average ``(1/h) int_t^{t+h} psi(Y_s) ds`` is accumulated per
    replica; replica means and standard errors are returned together with
    the pi-average target.

    ``psi_terms`` is a mode list realizing the observable as a stationary
    field; ``control`` maps a time array to control vectors of the fast
    noise dimension.
    """
    if mode not in _MODES:
        raise ValueError(f"mode must be one of {_MODES}")
    if mode == "controlled" and control is None:
        raise ValueError("controlled mode needs a control function of time")
    df = coeffs.fast_dim
    h = scale.window(beta)
    dt = scale.dt_max
    if h / dt < 10:
        raise ValueError("window shorter than 10 fast steps; decrease c_step")
    shifts = np.sort(np.atleast_1d(np.asarray(t_shifts, dtype=float)))
    if np.any(shifts < 0):
        raise ValueError("shifts must be nonnegative")
    horizon = float(shifts[-1] + h)
    n_steps = int(np.ceil(horizon / dt))
    dt = horizon / n_steps

    psi = compile_observable(sample, psi_terms)
    target = pi_average(sample, lambda y: psi(y), coeffs=coeffs, n_grid=n_grid)

    x0 = np.zeros(coeffs.slow_dim) if x_frozen is None else np.asarray(x_frozen, float)
    eps = scale.epsilon
    delta = scale.delta
    sq = np.sqrt(eps) / delta
    fdrift = eps / delta**2

    y = np.zeros((n_replicas, df))
    gens = [replica_stream(seed, i) for i in range(n_replicas)]
    cf = coeffs.constant("f")
    cg = coeffs.constant("g")
    kconst = None
    if coeffs.constant("tau1") is not None and coeffs.constant("tau2") is not None:
        kconst = fast_noise_factor(coeffs, np.zeros(df))
    xb = np.broadcast_to(x0, (n_replicas, coeffs.slow_dim))

    # Step ranges of each window [shift, shift + h).
    starts = np.ceil(shifts / dt - 1e-12).astype(int)
    count = max(1, int(round(h / dt)))
    acc = np.zeros((len(shifts), n_replicas))
    lengths = np.zeros(len(shifts))

    chunk = 4096
    noise = None
    sqdt = np.sqrt(dt)
    for k in range(n_steps):
        j = k % chunk
        if j == 0:
            nh = min(chunk, n_steps - k)
            noise = np.stack([g.standard_normal((nh, df)) for g in gens])
        active = [
            iw for iw in range(len(shifts))
            if starts[iw] <= k < starts[iw] + count
        ]
        if active:
            vals = psi(y)
            for iw in active:
                acc[iw] += vals
                lengths[iw] += 1

        dw = noise[:, j] * sqdt
        fv = cf if cf is not None else coeffs.f(y)
        kap = kconst if kconst is not None else fast_noise_factor(coeffs, y)
        drift = fdrift * fv
        if mode in ("perturbed", "controlled"):
            gv = cg if cg is not None else coeffs.g(xb, y)
            drift = drift + gv / delta
        if mode == "controlled":
            u = np.asarray(control(k * dt), dtype=float)
            drift = drift + _matvec(kap, np.broadcast_to(u, (n_replicas, df))) / delta
        y = y + dt * drift + sq * _matvec(kap, dw)

    means = (acc / lengths[:, None]).mean(axis=1)
    ses = (acc / lengths[:, None]).std(axis=1, ddof=1) / np.sqrt(n_replicas)
    return WindowAverages(
        shifts=shifts, means=means, std_errs=ses, target=float(target),
        window=h, mode=mode,
    )


def quenched_ergodic_report(
    samples_and_coeffs,
    scale: ScaleParams,
    psi_terms,
    t_shifts,
    mode: str = "uncontrolled",
    *,
    observable_name: str = "psi",
    seed: int = 0,
    **kwargs,
) -> ErgodicReport:
    """Aggregate window averages over several realizations.

    ``samples_and_coeffs`` is a sequence of (MediumSample, CoefficientSet)
    pairs.  The deviation table and its maximum (with the standard error
    at the maximizing cell) quantify uniformity over both shifts and
    realizations.
    """
    samples_and_coeffs = list(samples_and_coeffs)
    if not samples_and_coeffs:
        raise ValueError("need at least one realization")
    tables, ses, targets, seeds = [], [], [], []
    for i, (sample, coeffs) in enumerate(samples_and_coeffs):
        wa = ergodic_average(
            sample, coeffs, scale, psi_terms, t_shifts, mode,
            seed=seed + 104729 * i, **kwargs,
        )
        tables.append(wa.means)
        ses.append(wa.std_errs)
        targets.append(wa.target)
        seeds.append(sample.seed)
    table = np.stack(tables)
    se = np.stack(ses)
    target = float(np.mean(targets))
    dev = np.abs(table - target)
    imax = np.unravel_index(int(np.argmax(dev)), dev.shape)
    return ErgodicReport(
        observable=observable_name, window=wa.window,
        shifts=np.sort(np.atleast_1d(np.asarray(t_shifts, float))),
        seeds=seeds, table=table, std_errs=se, target=target,
        max_abs_dev=float(dev.max()), max_dev_se=float(se[imax]), mode=mode,
    )


@dataclass
class OccupationHistogram:
    """Sliding-window occupation mass over (u1, u2, fast position, time).

    The mass of time bin ``[t0, t1)`` sums exactly to ``t1 - t0`` by
    construction.  ``delta`` is the window width.
    """

    delta: float
    t_edges: np.ndarray
    u1_edges: np.ndarray
    u2_edges: np.ndarray
    y_edges: np.ndarray
    mass: np.ndarray  # (n_t, n_u1, n_u2) + (n_y,) * dfast

    def time_marginal(self) -> np.ndarray:
        return self.mass.reshape(self.mass.shape[0], -1).sum(axis=1)

    def u_marginal(self) -> np.ndarray:
        axes = (0,) + tuple(range(3, self.mass.ndim))
        return self.mass.sum(axis=axes)

    def y_marginal(self) -> np.ndarray:
        flat = self.mass.reshape((-1,) + self.mass.shape[3:])
        return flat.sum(axis=0)

    def zero_control_mass_fraction(self) -> float:
        """Fraction of mass in the u bins containing (0, 0)."""
        um = self.u_marginal()
        i1 = int(np.searchsorted(self.u1_edges, 0.0, side="right") - 1)
        i2 = int(np.searchsorted(self.u2_edges, 0.0, side="right") - 1)
        return float(um[i1, i2] / um.sum())


def _window_bin_weights(a: np.ndarray, b: np.ndarray, c: float, d: float, delta: float):
    """Exact integral over t in [c, d) of |step [a,b) intersected [t, t+delta)| / delta.

    The integrand is piecewise linear with breakpoints a-delta, min(a, b-delta),
    max(a, b-delta), b; a trapezoid over the clipped breakpoints is exact.
    """
    pts = np.stack([
        a - delta,
        np.minimum(a, b - delta),
        np.maximum(a, b - delta),
        b,
    ])  # (4, n)
    pts = np.clip(pts, c, d)

    def f_of(t):
        return np.maximum(0.0, np.minimum(b, t + delta) - np.maximum(a, t))

    vals = np.stack([f_of(pts[i]) for i in range(4)])
    seg = 0.5 * (vals[1:] + vals[:-1]) * np.diff(pts, axis=0)
    return seg.sum(axis=0) / delta


def build_occupation(
    run: PathSample,
    delta: float,
    *,
    T: float,
    n_t: int = 10,
    n_u: int = 9,
    u_max: float | None = None,
    n_y: int = 16,
) -> OccupationHistogram:
    """Occupation histogram of a controlled run over sliding windows.

    Needs per-step controls in the run (``store_controls=True`` at full
    resolution) and a trajectory extending to ``T + delta`` with the
    control switched off after ``T``.  Each integration step contributes
    its exact window-overlap weight to the time bins, which makes the time
    marginal Lebesgue to rounding accuracy.
    """
    if run.U1 is None:
        raise ValueError("run must store controls (store_controls=True)")
    dt = run.dt
    n_steps = run.U1.shape[1]
    if run.times[-1] < T + delta - 1e-9:
        raise ValueError("trajectory must extend to T + delta")
    if delta < 10 * dt:
        raise ValueError("window must cover at least 10 steps")

    k1 = run.U1.shape[2]
    k2 = run.U2.shape[2] if run.U2 is not None else 0
    u1 = run.U1[..., 0] if k1 else np.zeros(run.U1.shape[:2])
    u2 = run.U2[..., 0] if k2 else np.zeros(u1.shape)
    if u_max is None:
        u_max = max(1e-12, 1.05 * float(np.abs(u1).max()), 1.05 * float(np.abs(u2).max()))
    if n_u % 2 == 0:
        n_u += 1  # keep a center bin containing zero
    u1_edges = np.linspace(-u_max, u_max, n_u + 1)
    u2_edges = np.linspace(-u_max, u_max, n_u + 1)
    t_edges = np.linspace(0.0, T, n_t + 1)
    y_edges = np.linspace(0.0, 1.0, n_y + 1)
    df = run.Y.shape[2]

    starts = np.arange(n_steps) * dt
    ends = starts + dt
    i_u1 = np.clip(np.searchsorted(u1_edges, u1, side="right") - 1, 0, n_u - 1)
    i_u2 = np.clip(np.searchsorted(u2_edges, u2, side="right") - 1, 0, n_u - 1)
    ymod = np.mod(run.Y[:, :n_steps, :], 1.0)
    i_y = np.clip((ymod * n_y).astype(int), 0, n_y - 1)

    n_rep = run.X.shape[0]
    shape = (n_t, n_u, n_u) + (n_y,) * df
    mass = np.zeros(shape)
    for j in range(n_t):
        w = _window_bin_weights(starts, ends, t_edges[j], t_edges[j + 1], delta)
        nz = w > 0
        if not np.any(nz):
            continue
        for rep in range(n_rep):
            idx = (np.full(nz.sum(), j), i_u1[rep, nz], i_u2[rep, nz]) + tuple(
                i_y[rep, nz, d] for d in range(df)
            )
            np.add.at(mass, idx, w[nz] / n_rep)
    return OccupationHistogram(
        delta=delta, t_edges=t_edges, u1_edges=u1_edges, u2_edges=u2_edges,
        y_edges=y_edges, mass=mass,
    )


def pi_histogram(sample: MediumSample, coeffs: CoefficientSet, n_y: int = 16,
                 *, n_sub: int = 64) -> np.ndarray:
    """Invariant-law mass per fast-position bin, by sub-bin quadrature."""
    dens = invariant_density(sample, coeffs, n_grid=n_y * n_sub)
    df = sample.fast_dim
    pts = torus_points(n_y * n_sub, df)
    w = dens.m_tilde(pts)
    w = w / w.sum()
    idx = np.clip((pts * n_y).astype(int), 0, n_y - 1)
    out = np.zeros((n_y,) * df)
    np.add.at(out, tuple(idx[:, d] for d in range(df)), w)
    return out


def total_variation(p: np.ndarray, q: np.ndarray) -> float:
    p = p / p.sum()
    q = q / q.sum()
    return float(0.5 * np.abs(p - q).sum())


@dataclass
class DriftCheck:
    """Replica-mean slow path against its averaged reference."""

    times: np.ndarray
    mean_path: np.ndarray
    reference: np.ndarray
    sup_gap: float
    max_std_err: float


def _rk4_drift(eff: EffectiveCoefficients, x0, times, substeps: int = 8):
    x = np.atleast_1d(np.asarray(x0, float)).copy()
    out = np.empty((len(times), len(x)))
    out[0] = x
    for i in range(len(times) - 1):
        h = (times[i + 1] - times[i]) / substeps
        for _ in range(substeps):
            k1 = eff.r(x)
            k2 = eff.r(x + 0.5 * h * k1)
            k3 = eff.r(x + 0.5 * h * k2)
            k4 = eff.r(x + h * k3)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        out[i + 1] = x
    return out


def viability_drift_check(
    run: PathSample,
    eff: EffectiveCoefficients,
    psi_ref=None,
) -> DriftCheck:
    """Sup-norm gap between the replica-mean slow path and its limit.

    Zero-control runs are compared against the drift ODE solved on the
    stored time grid; path-tracking runs against the supplied reference
    path.  No assertion is made here, only the gap and the worst standard
    error of the mean are reported.
    """
    mean = run.X.mean(axis=0)
    if psi_ref is None:
        ref = _rk4_drift(eff, run.X[0, 0], run.times)
    else:
        ref = psi_ref.position_at(run.times)
    gap = float(np.abs(mean - ref).max())
    se = run.X.std(axis=0, ddof=1) / np.sqrt(run.n_replicas)
    return DriftCheck(
        times=run.times, mean_path=mean, reference=ref,
        sup_gap=gap, max_std_err=float(se.max()),
    )
