"""Stationary ergodic random environments on the torus and their coefficient fields.

An environment realization is a point ``gamma`` of a probability space on
which shifts of the fast variable act measure preserving.  Three concrete
families are implemented, all built from 1-periodic structures on the unit
torus:

``random_shift_periodic``
    Deterministic periodic fields evaluated at ``y + shift`` with a uniform
    random shift.  Shifting ``y`` shifts the realization, which is exactly
    the stationarity of the family.

``random_phase_fourier``
    Finite Fourier sums whose modes carry i.i.d. uniform phases.  A generic
    stationary family; its invariant density is not available in closed
    form, so it is restricted to modules that never need one (dynamics,
    diagnostics).

``gradient``
    Reversible fast dynamics: the fast drift is the negative gradient of a
    periodic potential ``Q`` and the fast noise is the constant matrix
    ``sqrt(2 * d_const) * I``.  The environment process then has the
    explicit invariant density proportional to ``exp(-Q / d_const)``.

Coefficient fields (``b, c, sigma, f, g, tau1, tau2``) are sums of
:class:`FieldTerm` entries, each a trigonometric mode in ``y`` optionally
multiplied by a linear factor in the slow variable ``x``.  All evaluators
broadcast over leading batch axes.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .rng import medium_stream

TWO_PI = 2.0 * np.pi

FAMILIES = ("random_shift_periodic", "random_phase_fourier", "gradient")

#: Field names and their shapes as functions of (m, dfast, k1, k2).
_FIELD_SHAPES = {
    "b": lambda m, df, k1, k2: (m,),
    "c": lambda m, df, k1, k2: (m,),
    "sigma": lambda m, df, k1, k2: (m, k1),
    "f": lambda m, df, k1, k2: (df,),
    "g": lambda m, df, k1, k2: (df,),
    "tau1": lambda m, df, k1, k2: (df, k1),
    "tau2": lambda m, df, k1, k2: (df, k2),
}

#: Fields that may carry a linear x factor.
_X_DEPENDENT_OK = ("c", "sigma", "g")


class DensityUnavailableError(RuntimeError):
    """Raised when a closed-form invariant density is required but unknown."""


@dataclass(frozen=True)
class FieldTerm:
    """One additive term of a coefficient field.

    The term evaluates to::

        amplitude * trig(2*pi * wavevector . (y + shift) + phase) * (x_weight . x)

    where ``trig`` is ``cos`` or ``sin``, a missing wavevector means the term
    is constant in ``y``, and a missing ``x_weight`` means the factor in
    ``x`` is 1.
    """

    amplitude: float
    wavevector: tuple[int, ...] | None = None
    kind: str = "cos"
    phase: float = 0.0
    x_weight: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.kind not in ("cos", "sin"):
            raise ValueError(f"kind must be 'cos' or 'sin', got {self.kind!r}")
        if self.wavevector is not None:
            object.__setattr__(self, "wavevector", tuple(int(k) for k in self.wavevector))
        if self.x_weight is not None:
            object.__setattr__(self, "x_weight", tuple(float(w) for w in self.x_weight))


@dataclass(frozen=True)
class MediumSample:
    """One realization of the random environment.

    Fixing ``seed`` reproduces the sample bit-exactly.  ``shift`` lives on
    the unit torus of the fast dimension; ``phases`` maps declared
    wavevectors to angles in ``[0, 2*pi)``.
    """

    family: str
    fast_dim: int
    slow_dim: int
    seed: int
    shift: np.ndarray
    phases: dict[tuple[int, ...], float] = field(default_factory=dict)
    potential: tuple[FieldTerm, ...] = ()
    d_const: float | None = None

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if not (np.all(self.shift >= 0.0) and np.all(self.shift < 1.0)):
            raise ValueError("shift components must lie in [0, 1)")
        for theta in self.phases.values():
            if not 0.0 <= theta < TWO_PI:
                raise ValueError("phases must lie in [0, 2*pi)")
        if self.family == "gradient" and (self.d_const is None or self.d_const <= 0):
            raise ValueError("gradient family needs d_const > 0")


def sample_medium(
    family: str,
    *,
    fast_dim: int,
    slow_dim: int = 1,
    seed: int,
    d_const: float | None = None,
    potential: tuple[FieldTerm, ...] | list[FieldTerm] = (),
    wavevectors: tuple[tuple[int, ...], ...] | list = (),
    randomize: str = "shift",
) -> MediumSample:
    """Draw one environment realization.

    Parameters
    ----------
    family : str
        One of :data:`FAMILIES`.
    fast_dim, slow_dim : int
        Dimensions of the fast and slow variables; ``fast_dim`` in {1, 2}.
    seed : int
        Realization seed; the sample is a deterministic function of
        (family, parameters, seed).
    d_const : float, optional
        Temperature-like constant of the gradient family (> 0).
    potential : sequence of FieldTerm, optional
        Modes of the periodic potential ``Q`` (gradient family).  May be
        empty, in which case the potential is flat and the invariant
        density uniform.
    wavevectors : sequence of int tuples, optional
        Declared modes of the random_phase_fourier family; each gets an
        independent uniform phase.  Must be nonempty for that family.
    randomize : {"shift", "phase"}
        How the gradient family randomizes its realization: a global
        uniform shift (default) or i.i.d. phases on the potential modes.
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}, expected one of {FAMILIES}")
    if fast_dim not in (1, 2):
        raise ValueError("fast_dim must be 1 or 2")
    if slow_dim < 1:
        raise ValueError("slow_dim must be >= 1")
    if randomize not in ("shift", "phase"):
        raise ValueError("randomize must be 'shift' or 'phase'")

    gen = medium_stream(seed)
    shift = np.zeros(fast_dim)
    phases: dict[tuple[int, ...], float] = {}
    potential = tuple(potential)

    if family == "random_shift_periodic":
        shift = gen.uniform(size=fast_dim)
    elif family == "random_phase_fourier":
        wavevectors = tuple(tuple(int(k) for k in wv) for wv in wavevectors)
        if len(wavevectors) == 0:
            raise ValueError("random_phase_fourier needs a nonempty mode list")
        if len(set(wavevectors)) != len(wavevectors):
            raise ValueError("duplicate wavevectors in mode list")
        draws = gen.uniform(0.0, TWO_PI, size=len(wavevectors))
        phases = {wv: float(th) for wv, th in zip(wavevectors, draws)}
    else:  # gradient
        if d_const is None or d_const <= 0:
            raise ValueError("gradient family needs d_const > 0")
        for term in potential:
            if term.x_weight is not None:
                raise ValueError("potential must not depend on x")
        if randomize == "shift":
            shift = gen.uniform(size=fast_dim)
        else:
            draws = gen.uniform(0.0, TWO_PI, size=len(potential))
            # Per-mode phases are folded into shifted copies of the terms.
            potential = tuple(
                FieldTerm(t.amplitude, t.wavevector, t.kind, t.phase + float(th))
                for t, th in zip(potential, draws)
            )

    return MediumSample(
        family=family,
        fast_dim=fast_dim,
        slow_dim=slow_dim,
        seed=int(seed),
        shift=shift,
        phases=phases,
        potential=potential,
        d_const=None if family != "gradient" else float(d_const),
    )


class CoefficientSpec:
    """Declares the coefficient fields, independent of any realization.

    Use :meth:`add` to append :class:`FieldTerm` entries to a named field
    component, then :func:`build_coefficients` to bind a realization.
    """

    def __init__(self, slow_dim: int, fast_dim: int, k1: int, k2: int = 0):
        if min(slow_dim, fast_dim, k1) < 1 or k2 < 0:
            raise ValueError("dimensions must be positive (k2 may be 0)")
        self.slow_dim = slow_dim
        self.fast_dim = fast_dim
        self.k1 = k1
        self.k2 = k2
        self.terms: dict[str, list[tuple[tuple[int, ...], FieldTerm]]] = {
            name: [] for name in _FIELD_SHAPES
        }

    def field_shape(self, name: str) -> tuple[int, ...]:
        return _FIELD_SHAPES[name](self.slow_dim, self.fast_dim, self.k1, self.k2)

    def add(self, name: str, index, term: FieldTerm) -> "CoefficientSpec":
        if name not in _FIELD_SHAPES:
            raise ValueError(f"unknown field {name!r}")
        shape = self.field_shape(name)
        index = tuple(int(i) for i in np.atleast_1d(index))
        if len(index) != len(shape) or any(
            not 0 <= i < s for i, s in zip(index, shape)
        ):
            raise ValueError(f"index {index} out of range for field {name} {shape}")
        if term.x_weight is not None:
            if name not in _X_DEPENDENT_OK:
                raise ValueError(f"field {name} cannot depend on x")
            if len(term.x_weight) != self.slow_dim:
                raise ValueError("x_weight length must equal slow_dim")
        if term.wavevector is not None and len(term.wavevector) != self.fast_dim:
            raise ValueError("wavevector length must equal fast_dim")
        self.terms[name].append((index, term))
        return self

    def add_constant(self, name: str, values) -> "CoefficientSpec":
        """Add constant entries for a whole field from an array."""
        values = np.asarray(values, dtype=float)
        shape = self.field_shape(name)
        if values.shape != shape:
            raise ValueError(f"expected shape {shape}, got {values.shape}")
        for index in np.ndindex(*shape):
            if values[index] != 0.0:
                self.add(name, index, FieldTerm(float(values[index])))
        return self

    @property
    def x_dependent(self) -> bool:
        return any(
            t.x_weight is not None for lst in self.terms.values() for _, t in lst
        )


class _CompiledField:
    """Vectorized evaluator for one tensor field.

    Shift equivariance is exact by construction: the realization shift is
    added to ``y`` before any trigonometric evaluation, so shifting the
    sample and shifting the argument produce bit-identical values.
    """

    __slots__ = ("shape", "const", "entries", "shift")

    def __init__(self, shape, const, entries, shift):
        self.shape = shape
        self.const = const  # ndarray of `shape`, or None
        self.entries = entries  # list of (index, amp, kvec, phase, xw)
        self.shift = shift

    @property
    def is_constant(self) -> bool:
        return not self.entries

    def __call__(self, x, y):
        batch = np.shape(y)[:-1]
        out = np.zeros(batch + self.shape)
        if self.const is not None:
            out += self.const
        if not self.entries:
            return out
        y_eff = y + self.shift
        for index, amp, kvec, phase, xw in self.entries:
            if kvec is None:  # constant in y, linear in x
                val = amp * (x @ xw)
            else:
                val = amp * np.cos(TWO_PI * (y_eff @ kvec) + phase)
                if xw is not None:
                    val = val * (x @ xw)
            out[(...,) + index] += val
        return out


def _compile_field(
    name: str,
    shape: tuple[int, ...],
    term_list: list[tuple[tuple[int, ...], FieldTerm]],
    shift: np.ndarray,
    phases: dict[tuple[int, ...], float],
) -> _CompiledField:
    const = np.zeros(shape)
    entries = []
    for index, term in term_list:
        phase = term.phase + (0.0 if term.kind == "cos" else -0.5 * np.pi)
        if term.wavevector is None:
            if term.x_weight is None:
                const[index] += term.amplitude
            else:
                # Constant in y, linear in x: the trig factor collapses.
                entries.append(
                    (index, term.amplitude * np.cos(phase), None, 0.0,
                     np.asarray(term.x_weight))
                )
            continue
        kvec = np.asarray(term.wavevector, dtype=float)
        if term.wavevector in phases:
            phase = phase + phases[term.wavevector]
        xw = None if term.x_weight is None else np.asarray(term.x_weight)
        entries.append((index, term.amplitude, kvec, phase, xw))
    return _CompiledField(shape, const if np.any(const) or not entries else const, entries, shift)


def _potential_gradient_terms(potential: tuple[FieldTerm, ...], fast_dim: int):
    """Terms of f = -grad Q, differentiated mode by mode.

    d/dy_i [A cos(z)] = -A * 2*pi*k_i * sin(z), so the drift component picks
    up +A * 2*pi*k_i * sin(z); the sin case follows the same pattern with a
    sign flip.
    """
    out = []
    for term in potential:
        if term.wavevector is None:
            continue  # constant potential has zero gradient
        for i, ki in enumerate(term.wavevector):
            if ki == 0:
                continue
            amp = term.amplitude * TWO_PI * ki
            if term.kind == "cos":
                out.append(((i,), FieldTerm(amp, term.wavevector, "sin", term.phase)))
            else:
                out.append(((i,), FieldTerm(-amp, term.wavevector, "cos", term.phase)))
    return out


class CoefficientSet:
    """Immutable, point-evaluable coefficient fields of one realization.

    All evaluators accept arrays ``x`` of shape ``(..., m)`` and ``y`` of
    shape ``(..., dfast)`` and broadcast over the leading axes.  The set is
    safe for concurrent read-only use.
    """

    def __init__(self, sample: MediumSample, spec: CoefficientSpec):
        if spec.fast_dim != sample.fast_dim or spec.slow_dim != sample.slow_dim:
            raise ValueError("spec dimensions do not match the medium sample")
        self.sample = sample
        self.slow_dim = spec.slow_dim
        self.fast_dim = spec.fast_dim
        self.k1 = spec.k1
        self.k2 = spec.k2
        self.x_dependent = spec.x_dependent
        self.b_offset: np.ndarray | None = None  # set by center_b()

        terms = {name: list(lst) for name, lst in spec.terms.items()}
        if sample.family == "gradient":
            for name in ("f", "tau1", "tau2"):
                if terms[name]:
                    raise ValueError(
                        f"gradient family derives {name} from the potential; "
                        "remove the explicit terms"
                    )
            if spec.k1 != spec.fast_dim:
                raise ValueError("gradient family requires k1 == fast_dim")
            terms["f"] = _potential_gradient_terms(sample.potential, sample.fast_dim)
            root = float(np.sqrt(2.0 * sample.d_const))
            for i in range(spec.fast_dim):
                terms["tau1"].append(((i, i), FieldTerm(root)))

        if sample.family == "random_phase_fourier":
            declared = set(sample.phases)
            used = {
                t.wavevector
                for lst in terms.values()
                for _, t in lst
                if t.wavevector is not None
            }
            missing = used - declared
            if missing:
                raise ValueError(
                    f"wavevectors {sorted(missing)} not declared in the medium sample"
                )

        self._fields = {
            name: _compile_field(name, spec.field_shape(name), lst, sample.shift, sample.phases)
            for name, lst in terms.items()
        }
        # Potential evaluator (gradient family), used for the invariant density.
        self._potential = _compile_field(
            "Q", (1,), [((0,), t) for t in sample.potential], sample.shift, sample.phases
        )

    # -- raw field access -------------------------------------------------

    def constant(self, name: str) -> np.ndarray | None:
        """The field value if the field is constant in (x, y), else None."""
        fld = self._fields[name]
        if not fld.is_constant:
            return None
        val = np.array(fld.const)
        if name == "b" and self.b_offset is not None:
            val = val - self.b_offset
        return val

    def b(self, y):
        val = self._fields["b"](None, y)
        if self.b_offset is not None:
            val = val - self.b_offset
        return val

    def c(self, x, y):
        return self._fields["c"](x, y)

    def sigma(self, x, y):
        return self._fields["sigma"](x, y)

    def f(self, y):
        return self._fields["f"](None, y)

    def g(self, x, y):
        return self._fields["g"](x, y)

    def tau1(self, y):
        return self._fields["tau1"](None, y)

    def tau2(self, y):
        return self._fields["tau2"](None, y)

    def potential_value(self, y):
        """The periodic potential Q at y (zero for non-gradient families)."""
        return self._potential(None, y)[..., 0]

    def eval_all(self, x, y) -> dict[str, np.ndarray]:
        """All seven coefficient fields at (x, y)."""
        return {
            "b": self.b(y),
            "c": self.c(x, y),
            "sigma": self.sigma(x, y),
            "f": self.f(y),
            "g": self.g(x, y),
            "tau1": self.tau1(y),
            "tau2": self.tau2(y),
        }

    # -- derived structure -------------------------------------------------

    def fast_covariance(self, y):
        """tau1 tau1^T + tau2 tau2^T at y, shape (..., dfast, dfast)."""
        t1 = self.tau1(y)
        t2 = self.tau2(y)
        cov = t1 @ np.swapaxes(t1, -1, -2)
        if self.k2 > 0:
            cov = cov + t2 @ np.swapaxes(t2, -1, -2)
        return cov

    def noise_floor(self, x=None, n: int = 256) -> tuple[float, float]:
        """Smallest eigenvalues of sigma sigma^T and tau1 tau1^T + tau2 tau2^T.

        Scanned over an n-point-per-dimension torus grid in y (and the given
        x, default 0), this is the verification-grid form of uniform
        nondegeneracy of the two diffusion matrices.
        """
        y = torus_grid(n if self.fast_dim == 1 else max(16, int(round(n ** (1 / self.fast_dim)))), self.fast_dim)
        if x is None:
            x = np.zeros(self.slow_dim)
        xb = np.broadcast_to(x, y.shape[:-1] + (self.slow_dim,))
        sig = self.sigma(xb, y)
        a_slow = sig @ np.swapaxes(sig, -1, -2)
        a_fast = self.fast_covariance(y)
        eig_slow = np.linalg.eigvalsh(a_slow).min()
        eig_fast = np.linalg.eigvalsh(a_fast).min()
        return float(eig_slow), float(eig_fast)

    def center_b(self, *, n_grid: int | None = None) -> np.ndarray:
        """Subtract the pi-mean from the oscillatory drift field b.

        The subtracted constant is recorded in ``b_offset`` and returned.
        Without the centering the resolvent solutions of the cell problem
        grow like 1/rho and the corrected drift diverges.  Requires a
        closed-form invariant density.
        """
        if self.b_offset is not None:
            return self.b_offset
        if self._fields["b"].is_constant and not np.any(self._fields["b"].const):
            self.b_offset = np.zeros(self.slow_dim)
            return self.b_offset
        offset = pi_average(
            self.sample, lambda y: self.b(y), coeffs=self, n_grid=n_grid
        )
        self.b_offset = np.atleast_1d(offset)
        return self.b_offset


def build_coefficients(
    sample: MediumSample, spec: CoefficientSpec, *, center_b: bool = True
) -> CoefficientSet:
    """Bind a coefficient declaration to an environment realization.

    When the family provides an invariant density and the oscillatory drift
    ``b`` is configured, its pi-mean is subtracted at build time (recorded
    in ``CoefficientSet.b_offset``).  Pass ``center_b=False`` to skip.
    """
    coeffs = CoefficientSet(sample, spec)
    if center_b:
        try:
            coeffs.center_b()
        except DensityUnavailableError:
            pass  # families without a density cannot center; corrector will refuse
    return coeffs


def eval_coefficients(sample_or_coeffs, x, y, spec: CoefficientSpec | None = None):
    """All coefficient values at (x, y) for a realization.

    Accepts either a prebuilt :class:`CoefficientSet` or a
    :class:`MediumSample` plus its :class:`CoefficientSpec`.
    """
    if isinstance(sample_or_coeffs, CoefficientSet):
        return sample_or_coeffs.eval_all(x, y)
    if spec is None:
        raise ValueError("need a CoefficientSpec when passing a MediumSample")
    return CoefficientSet(sample_or_coeffs, spec).eval_all(x, y)


# -- invariant density and torus quadrature --------------------------------


def torus_grid(n: int, dim: int) -> np.ndarray:
    """Uniform grid on the unit torus, nodes i/n per axis, shape (n**dim, dim)."""
    axes = [np.arange(n) / n] * dim
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=-1)


def default_n_grid(fast_dim: int) -> int:
    return 4096 if fast_dim == 1 else 256


@dataclass(frozen=True)
class InvariantDensity:
    """Unnormalized stationary density of the environment process.

    ``m_tilde`` maps y arrays of shape (..., dfast) to positive values;
    ``normalizer`` is its torus average, so the normalized density is
    ``m_tilde / normalizer``.
    """

    m_tilde: Callable[[np.ndarray], np.ndarray]
    normalizer: float
    fast_dim: int

    def density(self, y):
        return self.m_tilde(y) / self.normalizer


def invariant_density(
    sample: MediumSample,
    coeffs: CoefficientSet | None = None,
    *,
    n_grid: int | None = None,
) -> InvariantDensity:
    """Closed-form invariant density of the fast environment process.

    Available for the gradient family (``exp(-Q / d_const)``) and whenever
    the configured fast drift vanishes identically while the fast noise is
    constant (uniform density).  Raises :class:`DensityUnavailableError`
    otherwise.
    """
    n = n_grid or default_n_grid(sample.fast_dim)
    if sample.family == "gradient":
        pot = _compile_field(
            "Q", (1,), [((0,), t) for t in sample.potential], sample.shift, sample.phases
        )
        d = sample.d_const

        def m_tilde(y, _pot=pot, _d=d):
            return np.exp(-_pot(None, y)[..., 0] / _d)

    else:
        if coeffs is None:
            raise DensityUnavailableError(
                f"family {sample.family!r} needs the coefficient set to decide "
                "whether the fast dynamics is driftless"
            )
        f_const = coeffs.constant("f")
        t1_const = coeffs.constant("tau1")
        t2_const = coeffs.constant("tau2")
        driftless = f_const is not None and not np.any(f_const)
        const_noise = t1_const is not None and t2_const is not None
        if not (driftless and const_noise):
            raise DensityUnavailableError(
                "no closed-form invariant density for this configuration"
            )

        def m_tilde(y):
            return np.ones(np.shape(y)[:-1])

    grid = torus_grid(n, sample.fast_dim)
    vals = m_tilde(grid)
    if np.any(vals <= 0.0) or not np.all(np.isfinite(vals)):
        raise ValueError("invariant density must be positive and finite on the grid")
    return InvariantDensity(m_tilde=m_tilde, normalizer=float(vals.mean()), fast_dim=sample.fast_dim)


def compile_observable(sample: MediumSample, terms) -> Callable[[np.ndarray], np.ndarray]:
    """Realize a scalar stationary field from its mode list.

    The observable is evaluated at the environment coordinate (the shift
    and phases of the realization are applied), exactly like coefficient
    fields, so its window averages converge to the realization-independent
    pi-average.
    """
    fld = _compile_field(
        "psi", (1,), [((0,), t) for t in terms], sample.shift, sample.phases
    )

    def psi(y):
        return fld(None, y)[..., 0]

    return psi


def pi_average(
    sample: MediumSample,
    h: Callable[[np.ndarray], np.ndarray],
    *,
    coeffs: CoefficientSet | None = None,
    n_grid: int | None = None,
):
    """Average of a torus observable under the invariant environment law.

    Composite midpoint quadrature on a uniform n_grid-per-dimension grid of
    ``h * m_tilde`` normalized by the mass of ``m_tilde``.  ``h`` receives
    points of shape (N, dfast) and may return scalars or arrays per point;
    the average is taken over the leading axis.
    """
    n = n_grid or default_n_grid(sample.fast_dim)
    dens = invariant_density(sample, coeffs, n_grid=n)
    grid = torus_grid(n, sample.fast_dim)
    weights = dens.m_tilde(grid)
    if np.any(weights <= 0.0):
        raise ValueError("invariant density must be positive on the grid")
    vals = np.asarray(h(grid), dtype=float)
    w = weights.reshape(weights.shape + (1,) * (vals.ndim - 1))
    out = (vals * w).sum(axis=0) / weights.sum()
    return float(out) if np.ndim(out) == 0 else out
