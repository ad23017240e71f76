"""Monte-Carlo checks of the one-round lemma inequalities and the stationarity bound.

Each lemma bounds a conditional expectation given the state at the start of
round r, so the check replays that single round many times from one frozen
state with fresh minibatch (and participation) noise and compares the
sample mean against the closed-form right-hand side with 3-standard-error
slack.
"""
import dataclasses
import logging
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from app.constants import BoundKind, Purpose
from app.core.errors import DomainError
from app.models.models import ClientState, FederatedTask, FrozenState, LocalTrace
from app.schemas.experiment import CompressorSpec, ExperimentConfig
from app.schemas.theory import BoundReport, TheoryParams
from app.services.numerics import RandomStream, norm2_sq, ordered_sum
from app.services.objectives import (
    estimate_dissimilarity,
    estimate_noise,
    global_grad,
    smoothness_constant,
)
from app.services.protocol import Simulation, client_round, sample_participants
from app.services.theory import descent_conditions, rho, rho_pp, theorem1_rhs

logger = logging.getLogger(__name__)

MIN_SAMPLES = 100
STANDARD_ERRORS = 3.0


def freeze_state(config: ExperimentConfig, warmup_rounds: int, task: Optional[FederatedTask] = None) -> FrozenState:
    """Run `warmup_rounds` rounds so residuals are populated, then snapshot."""
    sim = Simulation(config, task=task)
    for _ in range(warmup_rounds):
        sim.step()
    return sim.freeze()


def theory_params_for(
    task: FederatedTask,
    config: ExperimentConfig,
    frozen: Optional[FrozenState] = None,
    probes: int = 50,
    noise_samples: int = 200,
) -> TheoryParams:
    """Constants certified on `task`: power-iteration L, fitted (β², ν²), sampled σ².

    σ² is the largest noise estimate over w_r and every client's preview
    point w_r − α e_k.
    """
    seed = config.seed
    sched = config.schedule
    L = smoothness_constant(task, seed)
    fit = estimate_dissimilarity(task, probes, RandomStream(seed))

    alpha = frozen.schedule.alpha_r if frozen is not None else sched.alpha.value
    noise = RandomStream(seed, purpose=Purpose.NOISE)
    w = frozen.w if frozen is not None else np.zeros(task.dim)
    sigma_sq = estimate_noise(task, w, sched.batch_size, noise_samples, noise)
    if frozen is not None:
        for k, state in enumerate(frozen.states):
            preview = w - alpha * state.residual
            sigma_sq = max(
                sigma_sq,
                estimate_noise(task, preview, sched.batch_size, noise_samples, noise.at(step=k), clients=[k]),
            )

    return TheoryParams(
        L=L,
        beta_sq=fit.beta_sq,
        nu_sq=fit.nu_sq,
        sigma_sq=sigma_sq,
        delta=config.compressor.delta(task.dim),
        eta=sched.server_lr,
        eta0=sched.local_lr,
        T=sched.local_steps,
        alpha=alpha,
        p=config.participation,
        K=task.K,
    )


# ---------------------------------------------------------------------------
# One-round replay
# ---------------------------------------------------------------------------

Replay = List[Tuple[int, ClientState, LocalTrace]]


def _replay(
    task: FederatedTask,
    frozen: FrozenState,
    compressor: CompressorSpec,
    stream: RandomStream,
    participants: Sequence[int],
) -> Replay:
    sched = dataclasses.replace(frozen.schedule, participants=tuple(participants))
    out = []
    for k in participants:
        _, new_state, trace = client_round(task, k, frozen.w, frozen.states[k], sched, stream, compressor)
        out.append((k, new_state, trace))
    return out


def _monte_carlo(
    task: FederatedTask,
    frozen: FrozenState,
    compressor: CompressorSpec,
    stream: RandomStream,
    samples: int,
    measure: Callable[[Replay], np.ndarray],
    participation: Optional[float] = None,
) -> np.ndarray:
    everyone = tuple(range(task.K))
    rows = []
    for s in range(samples):
        replica = stream.at(replica=s)
        participants = (
            everyone
            if participation is None
            else sample_participants(task.K, participation, frozen.r, replica)
        )
        rows.append(measure(_replay(task, frozen, compressor, replica, participants)))
    return np.array(rows, dtype=np.float64)


def _mean_and_error(values: np.ndarray) -> Tuple[float, float]:
    mean = float(values.mean())
    se = float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0
    return mean, se


# ---------------------------------------------------------------------------
# Right-hand sides
# ---------------------------------------------------------------------------

def _residual_drive(params: TheoryParams, grad_sq: float) -> float:
    """B∇ + Bνσ: what a round can push into the residuals besides ρĒ."""
    eta_r, T, L = params.eta0, params.T, params.L
    b2, nu2, s2 = params.beta_sq, params.nu_sq, params.sigma_sq
    from_grad = 8 * eta_r**2 * T**2 * b2 * grad_sq + 288 * L**2 * eta_r**4 * T**4 * b2 * grad_sq
    from_noise = (
        8 * eta_r**2 * T**2 * nu2
        + 4 * eta_r**2 * T * s2
        + 96 * L**2 * eta_r**4 * T**3 * s2
        + 1344 * L**2 * eta_r**4 * T**4 * nu2
    )
    return from_grad + from_noise


def local_drift_rhs(params: TheoryParams, grad_sq: float, energy: float) -> float:
    eta_r, T = params.eta0, params.T
    return (
        12 * eta_r**2 * T * params.sigma_sq
        + 168 * eta_r**2 * T**2 * params.nu_sq
        + 36 * eta_r**2 * T**2 * params.beta_sq * grad_sq
        + 3 * params.alpha**2 * energy
    )


def second_moment_rhs(params: TheoryParams, grad_sq: float, energy: float) -> float:
    eta_r, T, L, a = params.eta0, params.T, params.L, params.alpha
    s2, nu2 = params.sigma_sq, params.nu_sq
    return (
        2 * a**2 * energy
        + 8 * eta_r**2 * T**2 * grad_sq * (1 + 36 * L**2 * eta_r**2 * T**2 * params.beta_sq)
        + 4 * eta_r**2 * T * s2 / params.K
        + 96 * L**2 * eta_r**4 * T**3 * (s2 + 14 * T * nu2)
        + 24 * a**2 * eta_r**2 * L**2 * T**2 * energy
    )


def residual_recursion_rhs(params: TheoryParams, grad_sq: float, energy: float) -> float:
    contraction = rho(params.alpha, params.eta0 * params.L * params.T, params.delta)
    return contraction * energy + (1 - 1 / params.delta) * _residual_drive(params, grad_sq)


def pp_residual_recursion_rhs(params: TheoryParams, grad_sq: float, energy: float, p: float) -> float:
    contraction = rho_pp(params.alpha, params.eta0 * params.L * params.T, params.delta, p)
    return contraction * energy + p * (1 - 1 / params.delta) * _residual_drive(params, grad_sq)


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def _lemma_violations(params: TheoryParams) -> List[str]:
    violations = []
    if params.eta0 * params.L * params.T > 0.125:
        violations.append("eta_r <= 1/(8LT)")
    return violations


def verify_bound(
    kind: BoundKind,
    task: FederatedTask,
    params: TheoryParams,
    frozen: Optional[FrozenState],
    mc_samples: int,
    stream: RandomStream,
    compressor: Optional[CompressorSpec] = None,
    grad_norm_history: Optional[Sequence[float]] = None,
    f0_minus_fstar: Optional[float] = None,
) -> BoundReport:
    kind = BoundKind(kind)
    if kind == BoundKind.STATIONARITY:
        return _verify_stationarity(params, grad_norm_history, f0_minus_fstar)
    if mc_samples < MIN_SAMPLES:
        raise DomainError(f"mc_samples must be >= {MIN_SAMPLES}, got {mc_samples}")
    if frozen is None or compressor is None:
        raise DomainError(f"{kind.value} needs a frozen state and the compressor in use")

    grad_sq = norm2_sq(global_grad(task, frozen.w))
    energy = sum(norm2_sq(s.residual) for s in frozen.states) / task.K
    detail = {"grad_norm_sq": grad_sq, "residual_energy": energy, "alpha": params.alpha}

    if kind == BoundKind.LOCAL_DRIFT:
        def measure(replay: Replay) -> np.ndarray:
            T = len(replay[0][2].iterates)
            return np.array([
                sum(norm2_sq(trace.iterates[t] - frozen.w) for _, _, trace in replay) / task.K for t in range(T)
            ])

        values = _monte_carlo(task, frozen, compressor, stream, mc_samples, measure)
        # the bound holds at every local step; report the worst one
        worst = int(np.argmax(values.mean(axis=0)))
        lhs, se = _mean_and_error(values[:, worst])
        rhs = local_drift_rhs(params, grad_sq, energy)
        detail["step"] = float(worst)
        detail["drift_at_start"] = float(values[:, 0].mean())

    elif kind == BoundKind.SECOND_MOMENT:
        e_tilde = ordered_sum(s.residual for s in frozen.states) / task.K

        def measure(replay: Replay) -> np.ndarray:
            g_bar = ordered_sum(trace.update for _, _, trace in replay) / task.K
            return np.array(norm2_sq(params.alpha * e_tilde - g_bar))

        lhs, se = _mean_and_error(_monte_carlo(task, frozen, compressor, stream, mc_samples, measure))
        rhs = second_moment_rhs(params, grad_sq, energy)

    elif kind == BoundKind.RESIDUAL_RECURSION:
        def measure(replay: Replay) -> np.ndarray:
            return np.array(sum(norm2_sq(state.residual) for _, state, _ in replay) / task.K)

        lhs, se = _mean_and_error(_monte_carlo(task, frozen, compressor, stream, mc_samples, measure))
        rhs = residual_recursion_rhs(params, grad_sq, energy)
        detail["rho"] = rho(params.alpha, params.s0, params.delta)

    else:
        old = [norm2_sq(s.residual) for s in frozen.states]

        def measure(replay: Replay) -> np.ndarray:
            energies = list(old)
            for k, state, _ in replay:
                energies[k] = norm2_sq(state.residual)
            return np.array(sum(energies) / task.K)

        values = _monte_carlo(task, frozen, compressor, stream, mc_samples, measure, participation=params.p)
        lhs, se = _mean_and_error(values)
        p = len(frozen.schedule.participants) / task.K
        rhs = pp_residual_recursion_rhs(params, grad_sq, energy, p)
        detail["p"] = p

    violations = _lemma_violations(params)
    report = BoundReport(
        lemma=kind,
        empirical_lhs=lhs,
        theoretical_rhs=rhs,
        samples=mc_samples,
        standard_error=se,
        satisfied=lhs <= rhs + STANDARD_ERRORS * se,
        preconditions_met=not violations,
        violations=violations,
        detail=detail,
    )
    logger.info(f"{kind.value}: lhs={lhs:.6g} rhs={rhs:.6g} se={se:.3g} satisfied={report.satisfied}")
    return report


def _verify_stationarity(
    params: TheoryParams,
    grad_norm_history: Optional[Sequence[float]],
    f0_minus_fstar: Optional[float],
) -> BoundReport:
    if grad_norm_history is None or f0_minus_fstar is None:
        raise DomainError("stationarity needs the run's gradient-norm history and f(w0) - f*")
    R = len(grad_norm_history)
    if R < MIN_SAMPLES:
        raise DomainError(f"stationarity needs at least {MIN_SAMPLES} rounds, got {R}")
    lhs = float(np.mean(grad_norm_history))
    rhs = theorem1_rhs(params, f0_minus_fstar, R)
    conditions = descent_conditions(params)
    violations = [name for name, ok in conditions.flags.items() if not ok]
    return BoundReport(
        lemma=BoundKind.STATIONARITY,
        empirical_lhs=lhs,
        theoretical_rhs=rhs,
        samples=R,
        standard_error=0.0,
        satisfied=lhs <= rhs,
        preconditions_met=conditions.satisfied,
        violations=violations,
        detail={"f0_minus_fstar": f0_minus_fstar, "rounds": float(R)},
    )
