"""Closed-form constants of the convergence analysis.

Notation follows the config: ``eta`` is the server stepsize, ``eta0`` the
(constant) local stepsize, ``T`` the number of local steps and
``s = eta0·L·T`` the effective local work.
"""
import logging
import math
from typing import Dict, List

from app.core.errors import DomainError, InfeasibilityError
from app.schemas.theory import (
    ConstantsReport,
    DescentConditions,
    ErrorConstant,
    Theorem1Bound,
    TheoryParams,
)

logger = logging.getLogger(__name__)


def _check_domain(alpha: float, s: float, delta: float) -> None:
    if delta < 1:
        raise DomainError(f"delta must be >= 1, got {delta}")
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    if s < 0:
        raise DomainError(f"s must be >= 0, got {s}")


def rho(alpha: float, s: float, delta: float) -> float:
    """Residual contraction factor (1−1/δ)(2(1−α)² + 24α²s²)."""
    _check_domain(alpha, s, delta)
    return (1.0 - 1.0 / delta) * (2.0 * (1.0 - alpha) ** 2 + 24.0 * alpha**2 * s**2)


def rho_expanded(alpha: float, s: float, delta: float) -> float:
    """Same factor written as a quadratic in α: (1−1/δ)(2 − 4α + (2 + 24s²)α²)."""
    _check_domain(alpha, s, delta)
    return (1.0 - 1.0 / delta) * (2.0 - 4.0 * alpha + (2.0 + 24.0 * s**2) * alpha**2)


def rho_ef(delta: float) -> float:
    """Contraction of plain error feedback (α = 0)."""
    if delta < 1:
        raise DomainError(f"delta must be >= 1, got {delta}")
    return 2.0 * (1.0 - 1.0 / delta)


def alpha_star(s: float) -> float:
    if s < 0:
        raise DomainError(f"s must be >= 0, got {s}")
    return 1.0 / (1.0 + 12.0 * s**2)


def rho_min(s: float, delta: float) -> float:
    return rho_ef(delta) * (1.0 - alpha_star(s))


def rho_pp(alpha: float, s: float, delta: float, p: float) -> float:
    """(1−p) + p·ρ: residual contraction when only a fraction p of clients updates."""
    if not 0.0 < p <= 1.0:
        raise DomainError(f"p must lie in (0, 1], got {p}")
    return (1.0 - p) + p * rho(alpha, s, delta)


def residual_coefficient(params: TheoryParams) -> float:
    """Coefficient E multiplying the residual energy in the telescoped descent inequality."""
    eta, eta0, T, L, a = params.eta, params.eta0, params.T, params.L, params.alpha
    return (
        eta * a**2 * (1.0 / (eta0 * T) + 1.5 * eta0 * L**2 * T)
        + L * eta**2 * (2.0 * a**2 + 24.0 * a**2 * eta0**2 * L**2 * T**2)
        + L * eta**2 / 2.0
    )


def _drift_max(params: TheoryParams) -> float:
    eta0, T, L = params.eta0, params.T, params.L
    return 8.0 * eta0 * T + 288.0 * L**2 * eta0**3 * T**3


def _error_constant(params: TheoryParams, rho_max: float) -> float:
    return (
        (16.0 / params.eta)
        * (residual_coefficient(params) / (1.0 - rho_max))
        * (1.0 - 1.0 / params.delta)
        * params.beta_sq
        * _drift_max(params)
    )


def theta(params: TheoryParams) -> float:
    """Effective error constant Θ; the bound absorbs residual terms when Θ ≤ 1/2."""
    rho_max = rho(params.alpha, params.s0, params.delta)
    if rho_max >= 1.0:
        raise InfeasibilityError("rho_max < 1", rho_max)
    value = _error_constant(params, rho_max)
    if value > 0.5:
        logger.warning(f"Theta={value:.6g} exceeds 1/2; residual terms are not absorbed")
    return value


def theta_pp(params: TheoryParams) -> ErrorConstant:
    """Θ under partial participation, with ρ replaced by (1−p) + pρ."""
    rho_max = rho_pp(params.alpha, params.s0, params.delta, params.p)
    if rho_max >= 1.0:
        raise InfeasibilityError("rho_pp_max < 1", rho_max)
    value = _error_constant(params, rho_max)
    return ErrorConstant(value=value, rho_max=rho_max, absorbed=value <= 0.5)


def _floor_constants(params: TheoryParams) -> tuple:
    eta, eta0, T, L = params.eta, params.eta0, params.T, params.L
    rho_max = rho(params.alpha, params.s0, params.delta)
    ratio = residual_coefficient(params) / (1.0 - rho_max) if rho_max < 1.0 else math.inf
    scale = 32.0 / eta
    c_sigma = scale * (6.0 * eta * eta0**2 * L**2 * T + 96.0 * L**3 * eta * eta0**3 * T**2) + scale * ratio * (
        4.0 * eta0 + 96.0 * L**2 * eta0**3 * T**2
    )
    c_nu = scale * (84.0 * eta * eta0**2 * L**2 * T**2 + 1344.0 * L**3 * eta * eta0**3 * T**3) + scale * ratio * (
        8.0 * eta0 * T + 1344.0 * L**2 * eta0**3 * T**3
    )
    return c_sigma, c_nu


def descent_conditions(params: TheoryParams) -> DescentConditions:
    eta, eta0, T, L, b2 = params.eta, params.eta0, params.T, params.L, params.beta_sq
    s0 = params.s0
    partial = params.p < 1.0
    rho_max = rho_pp(params.alpha, s0, params.delta, params.p) if partial else rho(params.alpha, s0, params.delta)
    if rho_max < 1.0:
        theta_value = theta_pp(params).value if partial else _error_constant(params, rho_max)
    else:
        theta_value = math.inf

    a_coefficient = (
        -eta * eta0 * T / 4.0
        + 18.0 * eta * eta0**3 * L**2 * b2 * T**3
        + L * eta**2 * (8.0 * eta0**2 * T**2 + 288.0 * L**2 * eta0**4 * T**4 * b2)
    )
    a_threshold = -eta * eta0 * T / 16.0
    flags = {
        "s0_small": s0 <= 0.125,
        "drift_small": 18.0 * b2 * s0**2 <= 0.125,
        "server_lr_small": eta <= 1.0 / (256.0 * b2 * L * eta0 * T),
        "rho_below_one": rho_max < 1.0,
        "theta_absorbed": theta_value <= 0.5,
        "descent_coefficient": a_coefficient <= a_threshold,
    }
    return DescentConditions(
        flags=flags,
        a_coefficient=a_coefficient,
        a_threshold=a_threshold,
        satisfied=all(flags.values()),
    )


def theorem1_bound(params: TheoryParams, f0_minus_fstar: float, R: int) -> Theorem1Bound:
    """Right-hand side of the averaged stationarity bound, term by term.

    For p < 1 the optimisation term and the compression floor are divided by
    p and the mini-batch term becomes 128Lη₀σ²/(p·m).
    """
    if R < 1:
        raise DomainError(f"R must be >= 1, got {R}")
    if f0_minus_fstar < 0:
        raise DomainError(f"f0 - f* must be >= 0, got {f0_minus_fstar}")
    eta, eta0, T, L, p = params.eta, params.eta0, params.T, params.L, params.p
    c_sigma, c_nu = _floor_constants(params)

    optimization = 32.0 * f0_minus_fstar / (eta * eta0 * T * R) / p
    floor = (1.0 - 1.0 / params.delta) * (
        c_sigma * eta0**2 * L**2 * T * params.sigma_sq + c_nu * eta0**2 * L**2 * T**2 * params.nu_sq
    )
    if floor != 0.0:
        floor /= p
    minibatch = 128.0 * L * eta0 * params.sigma_sq / (p * params.m if p < 1.0 else params.K)

    conditions = descent_conditions(params)
    warnings: List[str] = [f"precondition violated: {name}" for name, ok in conditions.flags.items() if not ok]
    for w in warnings:
        logger.warning(w)
    return Theorem1Bound(
        optimization_term=optimization,
        compression_floor=floor,
        minibatch_term=minibatch,
        total=optimization + floor + minibatch,
        c_sigma=c_sigma,
        c_nu=c_nu,
        preconditions=conditions.flags,
        warnings=warnings,
    )


def theorem1_rhs(params: TheoryParams, f0_minus_fstar: float, R: int) -> float:
    return theorem1_bound(params, f0_minus_fstar, R).total


def constants_report(params: TheoryParams) -> ConstantsReport:
    s0 = params.s0
    notes: List[str] = []
    rho_max = rho(params.alpha, s0, params.delta)
    pp = rho_pp(params.alpha, s0, params.delta, params.p)

    theta_value = None
    if rho_max < 1.0:
        theta_value = _error_constant(params, rho_max)
    else:
        notes.append(f"rho_max={rho_max:.6g} >= 1: Theta undefined")

    theta_pp_value = None
    if pp < 1.0:
        theta_pp_value = _error_constant(params, pp)
    else:
        notes.append(f"rho_pp_max={pp:.6g} >= 1: residuals can stall under partial participation")

    flags: Dict[str, bool] = descent_conditions(params).flags
    for name, ok in flags.items():
        if not ok:
            notes.append(f"precondition violated: {name}")
    return ConstantsReport(
        s0=s0,
        rho=rho_max,
        rho_ef=rho_ef(params.delta),
        alpha_star=alpha_star(s0),
        rho_min=rho_min(s0, params.delta),
        residual_coefficient=residual_coefficient(params),
        rho_pp_max=pp,
        theta=theta_value,
        theta_pp=theta_pp_value,
        flags=flags,
        notes=notes,
    )
