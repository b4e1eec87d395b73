import numpy as np
import pytest
from scipy.stats import norm

from quench_ldp import (
    CoefficientSpec,
    DiscretePath,
    EffectiveCoefficients,
    FieldTerm,
    HalfSpaceEvent,
    build_coefficients,
    build_is_control,
    estimate_probability,
    homogenize,
    minimize_action,
    scaling_report,
    solve_corrector,
)
from quench_ldp.rareevent import _aggregate_weighted

from conftest import flat_gradient_sample, sine_spec


@pytest.fixture(scope="module")
def schilder_setup():
    sample = flat_gradient_sample(seed=1)
    spec = CoefficientSpec(1, 1, 1, 0)
    spec.add("sigma", (0, 0), FieldTerm(1.0))
    coeffs = build_coefficients(sample, spec)
    corr = solve_corrector(sample, coeffs, n_grid=256)
    eff = homogenize(sample, coeffs, corr)
    return sample, coeffs, corr, eff


def test_tracking_control_closed_form(schilder_setup):
    sample, coeffs, corr, eff = schilder_setup
    event = HalfSpaceEvent(np.array([1.0]), 1.0)
    res = minimize_action(np.zeros(1), event, 1.0, eff, 16)
    policy = build_is_control(res.path, eff, coeffs, corr)
    u1, u2 = policy.evaluate(0.4, np.zeros((3, 1)), np.full((3, 1), 0.2))
    # sigma = 1, xi = 0, r = 0, q = 1: u1 = psid = a / T
    assert np.allclose(u1, 1.0, atol=1e-9)
    assert u2.shape == (3, 0)


def test_zero_velocity_mismatch_gives_zero_control(schilder_setup):
    sample, coeffs, corr, eff = schilder_setup
    psi = DiscretePath.line([0.0], [0.0], 1.0, 8)  # velocity = r = 0
    policy = build_is_control(psi, eff, coeffs, corr)
    u1, _ = policy.evaluate(0.1, np.zeros((2, 1)), np.zeros((2, 1)))
    assert np.allclose(u1, 0.0, atol=1e-14)


def test_whole_space_probability_one(schilder_setup):
    sample, coeffs, corr, eff = schilder_setup
    event = HalfSpaceEvent(np.array([1.0]), -np.inf)
    for mode in ("plain", "is"):
        est = estimate_probability(
            sample, coeffs, event, eps_list=[0.2], T=1.0, x0=[0.0], y0=[0.0],
            n_replicas=64, mode=mode, seed=5, eff=eff, corrector=corr,
        )[0]
        assert est.p_hat == 1.0


def test_endpoint_event_rejected(schilder_setup):
    sample, coeffs, corr, eff = schilder_setup
    from quench_ldp import EndpointEvent

    with pytest.raises(TypeError):
        estimate_probability(
            sample, coeffs, EndpointEvent(np.array([1.0])), eps_list=[0.2],
            T=1.0, x0=[0.0], y0=[0.0], n_replicas=8, mode="plain", seed=1,
        )


def test_is_matches_gaussian_tail(schilder_setup):
    sample, coeffs, corr, eff = schilder_setup
    event = HalfSpaceEvent(np.array([1.0]), 1.0)
    est = estimate_probability(
        sample, coeffs, event, eps_list=[0.1], T=1.0, x0=[0.0], y0=[0.0],
        n_replicas=10000, mode="is", seed=11, eff=eff, corrector=corr,
    )[0]
    exact = norm.sf(1.0 / np.sqrt(0.1))
    assert abs(est.p_hat - exact) <= 3 * est.std_err
    assert est.relative_error <= 0.05
    assert est.ess <= est.n_replicas


def test_is_and_plain_agree_at_moderate_eps(schilder_setup):
    sample, coeffs, corr, eff = schilder_setup
    event = HalfSpaceEvent(np.array([1.0]), 1.0)
    kw = dict(eps_list=[0.2], T=1.0, x0=[0.0], y0=[0.0], n_replicas=10000)
    is_est = estimate_probability(sample, coeffs, event, mode="is", seed=3,
                                  eff=eff, corrector=corr, **kw)[0]
    pl_est = estimate_probability(sample, coeffs, event, mode="plain", seed=4,
                                  **kw)[0]
    comb = np.hypot(is_est.std_err, pl_est.std_err)
    assert abs(is_est.p_hat - pl_est.p_hat) <= 3 * comb


def test_log_space_aggregation_handles_huge_weights():
    ind = np.array([1.0, 1.0, 0.0, 1.0])
    logw = np.array([2000.0, 1999.0, 0.0, 1998.0])
    est = _aggregate_weighted(ind, logw, 0.05, "is")
    assert np.isfinite(est.log_p_hat)
    assert est.log_p_hat == pytest.approx(
        2000.0 + np.log((1 + np.exp(-1) + np.exp(-2)) / 4), rel=1e-12
    )
    assert est.max_log_weight == 2000.0
    assert 0 < est.ess <= 4


def test_no_hit_and_degenerate_flags():
    est = _aggregate_weighted(np.zeros(100), np.zeros(100), 0.1, "is")
    assert est.p_hat == 0.0 and "no_hits" in est.flags
    ind = np.zeros(100)
    ind[:2] = 1.0
    logw = np.zeros(100)
    logw[0] = 50.0
    est2 = _aggregate_weighted(ind, logw, 0.1, "is")
    assert "degenerate_ess" in est2.flags


def test_scaling_report_shape(schilder_setup):
    sample, coeffs, corr, eff = schilder_setup
    event = HalfSpaceEvent(np.array([1.0]), 1.0)
    ests = estimate_probability(
        sample, coeffs, event, eps_list=[0.3, 0.2, 0.1], T=1.0, x0=[0.0],
        y0=[0.0], n_replicas=4000, mode="is", seed=19, eff=eff, corrector=corr,
    )
    rep = scaling_report(ests, 0.5)
    assert [r.eps for r in rep.rows] == [0.3, 0.2, 0.1]
    exact_gaps = [
        abs(-e * np.log(norm.sf(1.0 / np.sqrt(e))) - 0.5) for e in (0.3, 0.2, 0.1)
    ]
    for row, g in zip(rep.rows, exact_gaps):
        assert row.gap == pytest.approx(g, abs=0.03)
    assert rep.gaps_decreasing
    with pytest.raises(ValueError):
        scaling_report(ests[:2], 0.5)


def test_drift_following_event_has_vanishing_rate():
    # threshold reachable by the mean drift: p -> 1 and -eps log p -> 0
    sample = flat_gradient_sample(seed=9)
    spec = CoefficientSpec(1, 1, 1, 0)
    spec.add("c", (0,), FieldTerm(0.6))
    spec.add("sigma", (0, 0), FieldTerm(1.0))
    coeffs = build_coefficients(sample, spec)
    corr = solve_corrector(sample, coeffs, n_grid=256)
    eff = homogenize(sample, coeffs, corr)
    event = HalfSpaceEvent(np.array([1.0]), 0.2)
    res = minimize_action(np.zeros(1), event, 1.0, eff, 16)
    assert res.value <= 1e-20
    vals = []
    for eps in (0.2, 0.1, 0.05):
        est = estimate_probability(
            sample, coeffs, event, eps_list=[eps], T=1.0, x0=[0.0], y0=[0.0],
            n_replicas=2000, mode="is", seed=50, eff=eff, corrector=corr,
        )[0]
        vals.append(est.minus_eps_log)
    assert all(v2 < v1 for v1, v2 in zip(vals, vals[1:]))
    assert vals[-1] <= 0.01


def test_u2_vanishes_with_zero_tau2():
    sample = flat_gradient_sample(seed=4)
    sample = type(sample)("random_shift_periodic", 1, 1, 4, sample.shift)
    spec = CoefficientSpec(1, 1, 1, 1)  # k2 = 1 but tau2 stays zero
    spec.add("sigma", (0, 0), FieldTerm(1.0))
    spec.add("b", (0,), FieldTerm(1.0, (1,), "sin"))
    spec.add("tau1", (0, 0), FieldTerm(np.sqrt(2.0)))
    coeffs = build_coefficients(sample, spec)
    corr = solve_corrector(sample, coeffs, n_grid=512)
    eff = homogenize(sample, coeffs, corr)
    psi = DiscretePath.line([0.0], [1.0], 1.0, 8)
    policy = build_is_control(psi, eff, coeffs, corr)
    y = np.linspace(0.0, 1.0, 7)[:, None]
    u1, u2 = policy.evaluate(0.2, np.zeros((7, 1)), y)
    assert np.allclose(u2, 0.0, atol=1e-14)
    assert not np.allclose(u1, 0.0)


def test_quenched_estimates_agree_across_media():
    # moderate eps so plain-level accuracy is cheap; 5 realizations
    event = HalfSpaceEvent(np.array([1.0]), 1.0)
    vals, ses = [], []
    for seed in range(5):
        sample = flat_gradient_sample(seed=seed)
        coeffs = build_coefficients(sample, sine_spec())
        corr = solve_corrector(sample, coeffs, n_grid=1024)
        eff = homogenize(sample, coeffs, corr)
        est = estimate_probability(
            sample, coeffs, event, eps_list=[0.15], T=1.0, x0=[0.0], y0=[0.0],
            n_replicas=3000, mode="is", seed=100 + seed, eff=eff, corrector=corr,
        )[0]
        vals.append(est.minus_eps_log)
        ses.append(0.15 * est.relative_error)  # delta-method on -eps log p
    vals = np.array(vals)
    ses = np.array(ses)
    for i in range(5):
        for j in range(i + 1, 5):
            comb = np.hypot(ses[i], ses[j])
            assert abs(vals[i] - vals[j]) <= 3 * comb + 1e-12
