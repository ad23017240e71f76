import math

import pytest

from app.core.errors import DomainError, InfeasibilityError
from app.schemas.theory import TheoryParams
from app.services.theory import (
    alpha_star,
    constants_report,
    descent_conditions,
    residual_coefficient,
    rho,
    rho_ef,
    rho_expanded,
    rho_min,
    rho_pp,
    theorem1_bound,
    theorem1_rhs,
    theta,
    theta_pp,
)


def params(**overrides) -> TheoryParams:
    data = dict(L=1.0, beta_sq=1.0, delta=1.005, eta=1.0, eta0=0.01, T=5, alpha=0.85)
    data.update(overrides)
    return TheoryParams(**data)


def test_rho_at_alpha_zero_is_error_feedback():
    for s in (0.0, 0.1, 0.7):
        assert rho(0.0, s, 2.0) == pytest.approx(1.0)
    assert rho_ef(2.0) == 1.0


def test_rho_example():
    assert rho(0.85, 0.1, 100.0) == pytest.approx(0.21622, abs=1e-5)
    assert rho_expanded(0.85, 0.1, 100.0) == pytest.approx(rho(0.85, 0.1, 100.0), rel=1e-12)


def test_rho_vanishes_for_lossless_channel():
    assert rho(0.3, 0.2, 1.0) == 0.0
    assert rho(1.0, 5.0, 1.0) == 0.0


def test_rho_domain():
    with pytest.raises(DomainError):
        rho(0.5, 0.1, 0.9)
    with pytest.raises(DomainError):
        rho(1.5, 0.1, 2.0)


def test_alpha_star_examples():
    assert alpha_star(0.0) == 1.0
    assert alpha_star(0.125) == pytest.approx(1 / 1.1875)
    assert 0.84 < alpha_star(0.125) <= 1.0


def test_alpha_star_minimises_rho():
    s, delta = 0.2, 50.0
    best = rho(alpha_star(s), s, delta)
    for i in range(101):
        assert best <= rho(i / 100, s, delta) * (1 + 1e-12)


def test_rho_min_examples():
    assert rho_min(0.125, 100.0) == pytest.approx(0.31263, abs=1e-5)
    assert rho_min(0.125, 100.0) == pytest.approx(rho(alpha_star(0.125), 0.125, 100.0), rel=1e-12)
    assert rho_min(0.0, 100.0) == 0.0


def test_rho_pp():
    assert rho_pp(0.85, 0.1, 100.0, 1.0) == rho(0.85, 0.1, 100.0)
    assert rho_pp(0.0, 0.1, 1e12, 0.1) >= 1.0
    with pytest.raises(DomainError):
        rho_pp(0.5, 0.1, 2.0, 0.0)


def test_residual_coefficient_examples():
    assert residual_coefficient(params()) == pytest.approx(16.4925375, rel=1e-9)
    assert residual_coefficient(params(alpha=0.0, eta=0.5, L=2.0)) == pytest.approx(2.0 * 0.25 / 2)


def test_theta_examples():
    assert theta(params(delta=1.0)) == 0.0
    assert theta(params()) == pytest.approx(0.572649428741424, rel=1e-9)


def test_theta_infeasible():
    with pytest.raises(InfeasibilityError) as info:
        theta(params(alpha=0.0, delta=100.0))
    assert "rho_max" in info.value.condition


def test_theta_pp_full_participation_matches_theta():
    p = params()
    result = theta_pp(p)
    assert result.value == theta(p)
    assert result.rho_max == rho(p.alpha, p.s0, p.delta)


def test_theta_pp_stalls_for_small_p():
    with pytest.raises(InfeasibilityError):
        theta_pp(params(alpha=0.0, delta=1e9, p=0.1, K=100))


def test_noiseless_lossless_bound_is_optimisation_term():
    p = params(delta=1.0, sigma_sq=0.0, nu_sq=0.0)
    for R in (10, 100, 1000):
        expected = 32.0 * 2.0 / (p.eta * p.eta0 * p.T * R)
        assert theorem1_rhs(p, 2.0, R) == pytest.approx(expected)


def test_bound_decays_with_rounds():
    p = params(sigma_sq=0.5, nu_sq=0.2, K=10)
    assert theorem1_rhs(p, 1.0, 1000) < theorem1_rhs(p, 1.0, 100)


def test_partial_participation_scales_bound():
    full = theorem1_bound(params(sigma_sq=0.5, K=10), 1.0, 100)
    half = theorem1_bound(params(sigma_sq=0.5, K=10, p=0.5), 1.0, 100)
    assert half.optimization_term == pytest.approx(2.0 * full.optimization_term)
    assert half.minibatch_term == pytest.approx(128.0 * 0.01 * 0.5 / (0.5 * 5))


def test_bound_reports_violated_preconditions():
    bound = theorem1_bound(params(eta0=0.1), 1.0, 100)
    assert not bound.preconditions["s0_small"]
    assert any("s0_small" in w for w in bound.warnings)


def test_bound_domain():
    with pytest.raises(DomainError):
        theorem1_bound(params(), 1.0, 0)
    with pytest.raises(DomainError):
        theorem1_bound(params(), -1.0, 10)


def test_descent_conditions_small_server_step():
    conditions = descent_conditions(params(eta=1e-3))
    assert conditions.flags["s0_small"]
    assert conditions.flags["server_lr_small"]
    assert conditions.a_coefficient <= conditions.a_threshold


def test_constants_report_notes_infeasible_theta():
    report = constants_report(params(alpha=0.0, delta=100.0))
    assert report.theta is None
    assert report.rho == pytest.approx(rho_ef(100.0))
    assert any("Theta undefined" in note for note in report.notes)
    assert not math.isnan(report.rho_min)
