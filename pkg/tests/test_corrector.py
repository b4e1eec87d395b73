import numpy as np
import pytest

from quench_ldp import (
    CoefficientSpec,
    FieldTerm,
    build_coefficients,
    extrapolate_gradient,
    pi_average,
    solve_cell_problem_grid,
    solve_cell_problem_mc,
    solve_corrector,
)
from quench_ldp.corrector import CellSolveError
from quench_ldp.medium import MediumSample

from conftest import FOUR_PI2, flat_gradient_sample, sine_spec


def _analytic_chi(y, rho):
    return np.sin(2 * np.pi * y) / (rho + FOUR_PI2)


def test_zero_rhs_gives_zero_fields(sine_env):
    sample, _ = sine_env
    coeffs = build_coefficients(sample, sine_spec(with_b=False))
    field = solve_corrector(sample, coeffs, n_grid=256)
    assert all(np.all(c == 0.0) for c in field.chi.values())
    assert np.all(field.grad_limit == 0.0)
    assert all(v == 0.0 for v in field.mass_decay.values())


def test_analytic_resolvent_solution(sine_env):
    sample, coeffs = sine_env
    rho = 1e-3
    chi, dchi, residual = solve_cell_problem_grid(sample, coeffs, rho, 4096)
    y = np.arange(4096) / 4096
    assert np.abs(chi[0] - _analytic_chi(y, rho)).max() <= 1e-5
    exact_d = 2 * np.pi * np.cos(2 * np.pi * y) / (rho + FOUR_PI2)
    assert np.abs(dchi[0, 0] - exact_d).max() <= 1e-5
    assert residual <= 1e-8


def test_residual_at_solver_tolerance(sine_env):
    sample, coeffs = sine_env
    _, _, residual = solve_cell_problem_grid(sample, coeffs, 1e-4, 512, tol=1e-10)
    assert residual <= 1e-10


def test_max_principle_bound(sine_env):
    sample, coeffs = sine_env
    for rho in (1.0, 1e-2, 1e-4):
        chi, _, _ = solve_cell_problem_grid(sample, coeffs, rho, 1024)
        assert np.abs(chi).max() <= 1.0 / rho + 1e-12


def test_second_order_grid_convergence(sine_env):
    sample, coeffs = sine_env
    rho = 1e-3
    errs = []
    for n in (64, 128, 256):
        chi, _, _ = solve_cell_problem_grid(sample, coeffs, rho, n)
        y = np.arange(n) / n
        errs.append(np.abs(chi[0] - _analytic_chi(y, rho)).max())
    for e_coarse, e_fine in zip(errs, errs[1:]):
        assert 3.5 <= e_coarse / e_fine <= 4.5


def test_gradient_potential_against_fine_grid():
    sample = flat_gradient_sample(zero_shift=True, q_amp=1.0)
    coeffs = build_coefficients(sample, sine_spec())
    rho = 1e-3
    chi, _, _ = solve_cell_problem_grid(sample, coeffs, rho, 4096)
    chi_fine, _, _ = solve_cell_problem_grid(sample, coeffs, rho, 2**18)
    assert np.abs(chi[0] - chi_fine[0][:: 2**18 // 4096]).max() <= 1e-6


def test_extrapolated_gradient_limit(sine_env):
    sample, coeffs = sine_env
    schedule = (1e-2, 1e-3, 1e-4)
    dchis = {}
    for rho in schedule:
        _, d, _ = solve_cell_problem_grid(sample, coeffs, rho, 4096)
        dchis[rho] = d
    limit, fit_residual, converged = extrapolate_gradient(schedule, dchis)
    y = np.arange(4096) / 4096
    assert np.abs(limit[0, 0] - np.cos(2 * np.pi * y) / (2 * np.pi)).max() <= 1e-6
    assert converged


def test_extrapolation_schedule_preconditions(sine_env):
    sample, coeffs = sine_env
    _, d, _ = solve_cell_problem_grid(sample, coeffs, 1e-2, 128)
    with pytest.raises(ValueError):
        extrapolate_gradient((1e-2, 1e-3), {1e-2: d, 1e-3: d})
    with pytest.raises(ValueError):
        extrapolate_gradient((1e-2, 5e-3, 2e-3), {r: d for r in (1e-2, 5e-3, 2e-3)})


def test_mass_decay_vanishes(sine_env):
    sample, coeffs = sine_env
    field = solve_corrector(
        sample, coeffs, n_grid=1024, rho_schedule=(1.0, 1e-1, 1e-2, 1e-3, 1e-4)
    )
    masses = [field.mass_decay[r] for r in sorted(field.mass_decay, reverse=True)]
    assert all(m2 < m1 for m1, m2 in zip(masses, masses[1:]))
    assert masses[-1] <= 1e-3 * masses[0]


def test_effective_inputs_stable_under_schedule_refinement(sine_env):
    # pi-average of the corrected drift piece is insensitive to halving
    # the smallest scheduled rho
    sample, coeffs = sine_env

    def corrected_drift(schedule):
        field = solve_corrector(sample, coeffs, n_grid=2048, rho_schedule=schedule)
        xi = field.grad_limit[0, 0]
        y = np.arange(2048)[:, None] / 2048
        g = np.cos(2 * np.pi * y[:, 0])
        return (xi * g).mean()

    base = corrected_drift((1e-2, 1e-3, 1e-4))
    refined = corrected_drift((1e-2, 1e-3, 1e-4, 5e-5))
    assert abs(base - refined) <= 1e-7


def test_rejects_uncentered_and_bad_rho(sine_env):
    sample, coeffs = sine_env
    with pytest.raises(ValueError):
        solve_cell_problem_grid(sample, coeffs, 0.0, 64)
    spec = sine_spec()
    raw = build_coefficients(sample, spec, center_b=False)
    raw.b_offset = None
    with pytest.raises(CellSolveError):
        solve_cell_problem_grid(sample, raw, 1e-3, 64)


def test_mc_zero_rhs(sine_env):
    sample, _ = sine_env
    coeffs = build_coefficients(sample, sine_spec(with_b=False))
    est, se, _ = solve_cell_problem_mc(sample, coeffs, 1.0, [[0.3]], 50, 10.0, seed=1)
    assert np.all(est == 0.0)
    assert np.all(se == 0.0)


def test_mc_matches_analytic_resolvent(sine_env):
    sample, coeffs = sine_env
    est, se, trunc = solve_cell_problem_mc(
        sample, coeffs, 1.0, [[0.25]], 4000, 10.0, seed=3
    )
    exact = _analytic_chi(np.array([0.25]), 1.0)[0]
    assert abs(est[0, 0] - exact) <= 3 * se[0, 0]
    assert trunc <= 1e-4


def test_mc_matches_grid_solution():
    sample = flat_gradient_sample(zero_shift=True, q_amp=1.0)
    coeffs = build_coefficients(sample, sine_spec())
    rho = 1.0
    chi, _, _ = solve_cell_problem_grid(sample, coeffs, rho, 2048)
    rng = np.random.default_rng(7)
    pts = rng.uniform(size=(8, 1))
    est, se, _ = solve_cell_problem_mc(sample, coeffs, rho, pts, 3000, 10.0, seed=5)
    grid_vals = np.interp(pts[:, 0], np.arange(2049) / 2048,
                          np.append(chi[0], chi[0, 0]))
    assert np.all(np.abs(est[:, 0] - grid_vals) <= 3 * se[:, 0] + 1e-4)


def test_mc_trunc_precondition(sine_env):
    sample, coeffs = sine_env
    with pytest.raises(ValueError):
        solve_cell_problem_mc(sample, coeffs, 1.0, [[0.0]], 10, 5.0)


def test_two_dimensional_separable_solve():
    # b depends on y1 only; the 2-d solve must reproduce the 1-d resolvent
    sample = MediumSample("gradient", 2, 1, 0, np.zeros(2), d_const=1.0)
    spec = CoefficientSpec(slow_dim=1, fast_dim=2, k1=2, k2=0)
    spec.add("b", (0,), FieldTerm(1.0, (1, 0), "sin"))
    spec.add("sigma", (0, 0), FieldTerm(1.0))
    coeffs = build_coefficients(sample, spec)
    rho = 1e-2
    chi, _, residual = solve_cell_problem_grid(sample, coeffs, rho, 64)
    y1 = np.arange(64) / 64
    expected = np.sin(2 * np.pi * y1) / (rho + FOUR_PI2)
    assert np.abs(chi[0] - expected[:, None]).max() <= 5e-4
    assert residual <= 1e-8
