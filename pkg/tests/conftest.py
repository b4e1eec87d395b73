import numpy as np
import pytest

from quench_ldp import CoefficientSpec, FieldTerm, build_coefficients
from quench_ldp.medium import MediumSample, sample_medium

FOUR_PI2 = 4.0 * np.pi**2
Q_SINE = 1.0 + 1.0 / FOUR_PI2  # effective diffusion of the sine environment


def flat_gradient_sample(seed=0, zero_shift=False, q_amp=0.0, d_const=1.0):
    """Gradient-family realization; zero_shift pins the realization for
    analytic comparisons."""
    pot = [FieldTerm(q_amp, (1,), "cos")] if q_amp else []
    if zero_shift:
        return MediumSample(
            "gradient", 1, 1, seed, np.zeros(1),
            potential=tuple(pot), d_const=d_const,
        )
    return sample_medium(
        "gradient", fast_dim=1, slow_dim=1, seed=seed,
        d_const=d_const, potential=pot,
    )


def sine_spec(*, c_terms=(), g_terms=(), sigma0=1.0, with_b=True):
    """Slow dim 1, fast dim 1 spec: b = sin mode, constant sigma, extras."""
    spec = CoefficientSpec(slow_dim=1, fast_dim=1, k1=1, k2=0)
    if with_b:
        spec.add("b", (0,), FieldTerm(1.0, (1,), "sin"))
    spec.add("sigma", (0, 0), FieldTerm(sigma0))
    for term in c_terms:
        spec.add("c", (0,), term)
    for term in g_terms:
        spec.add("g", (0,), term)
    return spec


@pytest.fixture
def sine_env():
    """Zero-shift sine environment: b=sin(2 pi y), sigma=1, tau1=sqrt(2)."""
    sample = flat_gradient_sample(zero_shift=True)
    coeffs = build_coefficients(sample, sine_spec())
    return sample, coeffs


@pytest.fixture
def constant_env():
    """Constant coefficients: c=0.5, sigma=1, flat potential."""
    sample = flat_gradient_sample(seed=3)
    spec = CoefficientSpec(1, 1, 1, 0)
    spec.add("c", (0,), FieldTerm(0.5))
    spec.add("sigma", (0, 0), FieldTerm(1.0))
    return sample, build_coefficients(sample, spec)
