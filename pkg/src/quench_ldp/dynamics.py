"""Time stepping of the slow/fast system, with and without controls.

The slow component moves on the order-one scale with noise of size
``sqrt(eps)``; the fast component relaxes on the ``delta**2 / eps`` scale.
Explicit Euler-Maruyama is used throughout, with the step tied to the fast
scale (``dt <= c_step * delta**2 / eps``) so the stiff component stays
resolved.  Controls enter the slow drift through ``sigma u1`` and the fast
drift through ``(tau1 u1 + tau2 u2) / delta``; the accumulated Girsanov
exponent makes the uncontrolled law absolutely continuous with respect to
the controlled one, with density::

    log M = -(1/sqrt(eps)) int u . dZ  -  (1/(2 eps)) int ||u||^2 dt

where ``Z = (W, B)`` is the driving noise of the controlled path.

Replicas are integrated in blocks, each replica on its own counter-based
stream keyed by ``(stream_seed, replica_id)``, so results are bit-identical
regardless of block size or thread scheduling.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .medium import CoefficientSet
from .rng import replica_stream

_BLOCK = 2048
_NOISE_CHUNK = 4096  # steps of noise drawn per replica per call


class IntegrationError(RuntimeError):
    """Non-finite state or step-size violation, with the offending step."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class ScaleParams:
    """Scale separation parameters (eps, delta = eps**a).

    The exponent must exceed 1 so that ``eps/delta`` diverges as eps goes
    to zero; ``rho = delta**2 / eps`` is both the fast relaxation scale and
    the matched regularization of the cell problem.
    """

    epsilon: float
    delta_exponent: float = 1.5
    c_step: float = 0.1

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.delta_exponent <= 1:
            raise ValueError(
                "delta_exponent must exceed 1 (eps/delta must diverge)"
            )
        if self.c_step <= 0:
            raise ValueError("c_step must be positive")

    @property
    def delta(self) -> float:
        return self.epsilon ** self.delta_exponent

    @property
    def eps_over_delta(self) -> float:
        return self.epsilon / self.delta

    @property
    def rho(self) -> float:
        return self.delta**2 / self.epsilon

    @property
    def dt_max(self) -> float:
        return self.c_step * self.rho

    def window(self, beta: float = 0.5) -> float:
        """Averaging window h = rho**(1 - beta) used by the ergodic checks."""
        if not 0.0 < beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        return self.rho ** (1.0 - beta)


@dataclass
class PathSample:
    """Stored trajectory of a replica batch.

    ``X`` has shape (n_rep, n_stored, m) and ``Y`` (n_rep, n_stored, dfast);
    ``Y`` may be None when fast storage was disabled.  ``times`` is the
    uniform storage grid; ``dt`` is the finer integration step.
    """

    times: np.ndarray
    X: np.ndarray
    Y: np.ndarray | None
    dt: float
    stream_seed: int
    replica_ids: np.ndarray
    U1: np.ndarray | None = None
    U2: np.ndarray | None = None

    @property
    def n_replicas(self) -> int:
        return self.X.shape[0]

    def mean_path(self) -> np.ndarray:
        return self.X.mean(axis=0)


@dataclass
class ControlledRun:
    """Result of a controlled integration."""

    path: PathSample
    log_weight: np.ndarray  # (n_rep,)
    control_cost: np.ndarray  # (n_rep,), 0.5 * int ||u||^2 dt
    cost_cap_exceeded: bool = False


class ControlPolicy:
    """Feedback control u(t, x, y) = (u1, u2).  The base policy is zero."""

    mode = "Zero"

    def __init__(self, k1: int, k2: int):
        self.k1 = k1
        self.k2 = k2

    def evaluate(self, t, x, y):
        batch = np.shape(x)[:-1]
        return np.zeros(batch + (self.k1,)), np.zeros(batch + (self.k2,))


def worker_count(threads: int | None = None) -> int:
    """Worker pool size, capped by the QUENCH_LDP_THREADS environment variable."""
    cap = os.environ.get("QUENCH_LDP_THREADS")
    n = threads if threads is not None else min(4, os.cpu_count() or 1)
    if cap is not None:
        n = min(n, max(1, int(cap)))
    return max(1, n)


def _steps_and_storage(T: float, dt_max: float, n_store: int | None, dt: float | None):
    """Uniform step and storage grid: n_steps a multiple of n_store - 1.

    ``n_store=None`` stores every integration step.
    """
    if T < 0:
        raise ValueError("T must be nonnegative")
    if T == 0:
        return 0, 0.0, 1
    if dt is not None and dt > dt_max * (1 + 1e-12):
        raise IntegrationError(
            f"requested dt={dt} violates the fast-scale bound {dt_max}"
        )
    base = dt if dt is not None else dt_max
    n_steps = max(1, int(np.ceil(T / base - 1e-12)))
    if n_store is None:
        return n_steps, T / n_steps, n_steps
    n_store = min(n_store, n_steps + 1)
    seg = max(1, n_store - 1)
    n_steps = int(np.ceil(n_steps / seg)) * seg
    return n_steps, T / n_steps, seg


def _matvec(mat, vec):
    if mat is None:
        return 0.0
    if mat.ndim == 2:
        return vec @ mat.T
    return np.einsum("...ij,...j->...i", mat, vec)


def _integrate_block(
    coeffs: CoefficientSet,
    scale: ScaleParams,
    x0,
    y0,
    T: float,
    stream_seed: int,
    replica_ids: np.ndarray,
    policy: ControlPolicy | None,
    n_steps: int,
    dt: float,
    store_every: int,
    store_fast: bool,
    store_controls: bool,
    control_until: float | None,
):
    m, df, k1, k2 = coeffs.slow_dim, coeffs.fast_dim, coeffs.k1, coeffs.k2
    nrep = len(replica_ids)
    eps = scale.epsilon
    delta = scale.delta
    eod = scale.eps_over_delta
    sqrt_eps = np.sqrt(eps)
    sqrt_dt = np.sqrt(dt)
    ktot = k1 + k2

    x = np.broadcast_to(np.asarray(x0, dtype=float), (nrep, m)).copy()
    y = np.broadcast_to(np.asarray(y0, dtype=float), (nrep, df)).copy()

    n_stored = n_steps // store_every + 1
    X = np.empty((nrep, n_stored, m))
    Y = np.empty((nrep, n_stored, df)) if store_fast else None
    U1 = np.empty((nrep, n_steps, k1)) if store_controls else None
    U2 = np.empty((nrep, n_steps, k2)) if store_controls else None
    X[:, 0] = x
    if Y is not None:
        Y[:, 0] = y

    log_weight = np.zeros(nrep)
    cost = np.zeros(nrep)

    # Constant fields are fetched once; varying ones are evaluated per step.
    cb = coeffs.constant("b")
    cf = coeffs.constant("f")
    ct1 = coeffs.constant("tau1")
    ct2 = coeffs.constant("tau2")
    cc = coeffs.constant("c")
    cg = coeffs.constant("g")
    csig = coeffs.constant("sigma")

    gens = [replica_stream(stream_seed, int(rid)) for rid in replica_ids]
    chunk = max(1, _NOISE_CHUNK)
    noise = None
    stored = 0

    for k in range(n_steps):
        j = k % chunk
        if j == 0:
            nsteps_here = min(chunk, n_steps - k)
            noise = np.stack(
                [g.standard_normal((nsteps_here, ktot)) for g in gens]
            )  # (nrep, chunk, ktot)
        dz = noise[:, j] * sqrt_dt
        dw = dz[:, :k1]
        db = dz[:, k1:]

        bv = cb if cb is not None else coeffs.b(y)
        cv = cc if cc is not None else coeffs.c(x, y)
        sv = csig if csig is not None else coeffs.sigma(x, y)
        fv = cf if cf is not None else coeffs.f(y)
        gv = cg if cg is not None else coeffs.g(x, y)
        t1 = ct1 if ct1 is not None else coeffs.tau1(y)
        t2 = ct2 if ct2 is not None else coeffs.tau2(y)

        if policy is not None:
            t = k * dt
            u1, u2 = policy.evaluate(t, x, y)
            if control_until is not None and t >= control_until:
                u1 = np.zeros_like(u1)
                u2 = np.zeros_like(u2)
            if store_controls:
                U1[:, k] = u1
                U2[:, k] = u2
            usq = (u1**2).sum(axis=-1) + (u2**2).sum(axis=-1)
            udz = (u1 * dw).sum(axis=-1) + ((u2 * db).sum(axis=-1) if k2 else 0.0)
            log_weight -= udz / sqrt_eps + 0.5 * usq * dt / eps
            cost += 0.5 * usq * dt
            drift_x = eod * bv + cv + _matvec(sv, u1)
            drift_y = eod * fv + gv + _matvec(t1, u1) + (_matvec(t2, u2) if k2 else 0.0)
        else:
            drift_x = eod * bv + cv
            drift_y = eod * fv + gv

        x = x + dt * drift_x + sqrt_eps * _matvec(sv, dw)
        noise_y = _matvec(t1, dw) + (_matvec(t2, db) if k2 else 0.0)
        y = y + (dt / delta) * drift_y + (sqrt_eps / delta) * noise_y

        if (k + 1) % store_every == 0:
            stored += 1
            X[:, stored] = x
            if Y is not None:
                Y[:, stored] = y
        if (k + 1) % 1024 == 0 and not (
            np.all(np.isfinite(x)) and np.all(np.isfinite(y))
        ):
            raise IntegrationError("non-finite state", step=k + 1)

    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise IntegrationError("non-finite state", step=n_steps)
    return X, Y, U1, U2, log_weight, cost


def _run_blocks(coeffs, scale, x0, y0, T, stream_seed, n_replicas, policy, *,
                dt, n_store, store_fast, store_controls, control_until, threads):
    n_steps, dt_eff, seg = _steps_and_storage(T, scale.dt_max, n_store, dt)
    if n_steps == 0:
        m, df = coeffs.slow_dim, coeffs.fast_dim
        X = np.broadcast_to(np.asarray(x0, float), (n_replicas, 1, m)).copy()
        Y = np.broadcast_to(np.asarray(y0, float), (n_replicas, 1, df)).copy()
        path = PathSample(
            times=np.zeros(1), X=X, Y=Y if store_fast else None, dt=0.0,
            stream_seed=stream_seed, replica_ids=np.arange(n_replicas),
        )
        return path, np.zeros(n_replicas), np.zeros(n_replicas)

    store_every = n_steps // seg
    ids = np.arange(n_replicas)
    blocks = [ids[i:i + _BLOCK] for i in range(0, n_replicas, _BLOCK)]

    def job(block):
        return _integrate_block(
            coeffs, scale, x0, y0, T, stream_seed, block, policy,
            n_steps, dt_eff, store_every, store_fast, store_controls,
            control_until,
        )

    if len(blocks) > 1 and worker_count(threads) > 1:
        with ThreadPoolExecutor(max_workers=worker_count(threads)) as pool:
            results = list(pool.map(job, blocks))
    else:
        results = [job(b) for b in blocks]

    X = np.concatenate([r[0] for r in results], axis=0)
    Y = np.concatenate([r[1] for r in results], axis=0) if store_fast else None
    U1 = np.concatenate([r[2] for r in results], axis=0) if store_controls else None
    U2 = np.concatenate([r[3] for r in results], axis=0) if store_controls else None
    logw = np.concatenate([r[4] for r in results])
    cost = np.concatenate([r[5] for r in results])
    times = np.linspace(0.0, n_steps * dt_eff, seg + 1)
    path = PathSample(
        times=times, X=X, Y=Y, dt=dt_eff, stream_seed=stream_seed,
        replica_ids=ids, U1=U1, U2=U2,
    )
    return path, logw, cost


def integrate_uncontrolled(
    sample,
    coeffs: CoefficientSet,
    scale: ScaleParams,
    x0,
    y0,
    T: float,
    stream_seed: int,
    *,
    n_replicas: int = 1,
    dt: float | None = None,
    n_store: int | None = 257,
    store_fast: bool = True,
    threads: int | None = None,
) -> PathSample:
    """Integrate the uncontrolled slow/fast system on [0, T].

    Parameters
    ----------
    sample, coeffs
        Environment realization and its bound coefficient fields
        (``sample`` is accepted for interface symmetry; the fields already
        carry the realization).
    scale : ScaleParams
        Scale separation; the step obeys ``dt <= c_step * delta**2 / eps``.
    x0, y0 : array_like
        Initial slow and fast states, broadcast over replicas.
    T : float
        Horizon.  ``T = 0`` returns the frozen initial state.
    stream_seed : int
        Base seed; replica ``i`` uses the stream keyed by
        ``(stream_seed, i)``, so the path batch is bit-reproducible and
        independent of scheduling.
    n_replicas, dt, n_store, store_fast, threads
        Batch size, optional explicit step (validated against the bound),
        number of stored time nodes (None stores every step), fast-path
        storage toggle, worker cap.

    Returns
    -------
    PathSample
    """
    del sample
    path, _, _ = _run_blocks(
        coeffs, scale, x0, y0, T, stream_seed, n_replicas, None,
        dt=dt, n_store=n_store, store_fast=store_fast, store_controls=False,
        control_until=None, threads=threads,
    )
    return path


def integrate_controlled(
    sample,
    coeffs: CoefficientSet,
    scale: ScaleParams,
    x0,
    y0,
    T: float,
    policy: ControlPolicy,
    stream_seed: int,
    *,
    n_replicas: int = 1,
    dt: float | None = None,
    n_store: int | None = 257,
    store_fast: bool = True,
    store_controls: bool = False,
    control_until: float | None = None,
    cost_cap: float | None = None,
    threads: int | None = None,
) -> ControlledRun:
    """Integrate the controlled system and accumulate its Girsanov exponent.

    The control shifts the slow drift by ``sigma u1`` and the fast drift by
    ``(tau1 u1 + tau2 u2)/delta``.  ``log_weight`` holds the per-replica
    density of the uncontrolled law with respect to the controlled one,
    evaluated along the controlled path; weighting bounded functionals by
    ``exp(log_weight)`` removes the bias introduced by the control.

    ``cost_cap`` flags (without stopping) runs whose realized quadratic
    control cost exceeds the admissibility cap.
    """
    del sample
    path, logw, cost = _run_blocks(
        coeffs, scale, x0, y0, T, stream_seed, n_replicas, policy,
        dt=dt, n_store=n_store, store_fast=store_fast,
        store_controls=store_controls, control_until=control_until,
        threads=threads,
    )
    exceeded = bool(cost_cap is not None and np.any(cost > cost_cap))
    return ControlledRun(
        path=path, log_weight=logw, control_cost=cost, cost_cap_exceeded=exceeded
    )


def fast_noise_factor(coeffs: CoefficientSet, y):
    """Matrix square root kappa(y) with kappa kappa^T = tau1 tau1^T + tau2 tau2^T."""
    cov = coeffs.fast_covariance(y)
    if coeffs.fast_dim == 1:
        return np.sqrt(cov)
    return np.linalg.cholesky(cov)


def integrate_fast_rescaled(
    sample,
    coeffs: CoefficientSet,
    y0,
    T_fast: float,
    stream_seed: int,
    *,
    n_replicas: int = 1,
    dt_fast: float = 1e-3,
    n_store: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Integrate the rescaled fast process dY = f dt + kappa dW on [0, T_fast].

    This is the unit-speed form of the fast component (the original fast
    path sampled at times ``delta**2 t / eps``), driven by a single
    Brownian motion through the square root of the combined fast
    covariance.

    Returns ``(times, paths)`` with paths of shape (n_rep, n_stored, dfast).
    """
    del sample
    df = coeffs.fast_dim
    if T_fast < 0:
        raise ValueError("T_fast must be nonnegative")
    n_steps = int(np.ceil(T_fast / dt_fast - 1e-12)) if T_fast > 0 else 0
    if n_steps == 0:
        times = np.zeros(1)
        paths = np.broadcast_to(np.asarray(y0, float), (n_replicas, 1, df)).copy()
        return times, paths
    dt = T_fast / n_steps
    n_store = n_store or min(n_steps + 1, 1025)
    seg = max(1, n_store - 1)
    n_steps = int(np.ceil(n_steps / seg)) * seg
    dt = T_fast / n_steps
    every = n_steps // seg

    y = np.broadcast_to(np.asarray(y0, float), (n_replicas, df)).copy()
    out = np.empty((n_replicas, seg + 1, df))
    out[:, 0] = y
    cf = coeffs.constant("f")
    kconst = None
    if coeffs.constant("tau1") is not None and coeffs.constant("tau2") is not None:
        kconst = fast_noise_factor(coeffs, np.zeros(df))

    gens = [replica_stream(stream_seed, i) for i in range(n_replicas)]
    chunk = _NOISE_CHUNK
    noise = None
    stored = 0
    sqdt = np.sqrt(dt)
    for k in range(n_steps):
        j = k % chunk
        if j == 0:
            nh = min(chunk, n_steps - k)
            noise = np.stack([g.standard_normal((nh, df)) for g in gens])
        dw = noise[:, j] * sqdt
        fv = cf if cf is not None else coeffs.f(y)
        kap = kconst if kconst is not None else fast_noise_factor(coeffs, y)
        y = y + dt * fv + _matvec(kap, dw)
        if (k + 1) % every == 0:
            stored += 1
            out[:, stored] = y
    if not np.all(np.isfinite(y)):
        raise IntegrationError("non-finite fast state", step=n_steps)
    times = np.linspace(0.0, T_fast, seg + 1)
    return times, out
