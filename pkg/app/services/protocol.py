"""Client and server steps of step-ahead partial error feedback.

One round, for every participating client k:

    w_start = w_r − α_r e_k              (step-ahead preview)
    T local SGD steps from w_start        -> w_end
    g_k     = w_start − w_end
    u_k     = (1 − α_r) e_k + g_k         (partial error feedback)
    send C(u_k), keep e_k ← u_k − C(u_k)

and the server applies w_{r+1} = w_r − η · mean_k C(u_k). α_r = 0 is classical
error feedback, α_r = 1 the full step-ahead variant. Clients outside the
sampled set keep their residual untouched.
"""
import logging
import math
from concurrent.futures import Executor
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.constants import AlphaRule, LocalLrDecay, Purpose
from app.core.errors import ConfigError, DimensionError, DivergenceError, DomainError, NumericError
from app.models.models import (
    ClientMessage,
    ClientState,
    FederatedTask,
    FrozenState,
    LocalTrace,
    RoundSchedule,
    RoundTrace,
)
from app.schemas.experiment import AlphaSpec, CompressorSpec, ExperimentConfig, ScheduleSpec, participant_count
from app.services.compressors import compress, residual
from app.services.numerics import RandomStream, check_finite, draw_gaussian, norm2_sq, ordered_sum
from app.services.objectives import build_task, smoothness_constant, stochastic_grad
from app.services.theory import alpha_star

logger = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Schedules
# ---------------------------------------------------------------------------

def local_lr_for_round(schedule: ScheduleSpec, r: int, rounds: int) -> float:
    base = schedule.local_lr
    if schedule.local_lr_decay == LocalLrDecay.COSINE:
        horizon = max(1, rounds)
        floor = schedule.local_lr_min
        return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * r / horizon))
    if schedule.local_lr_decay == LocalLrDecay.STEP:
        return base * schedule.local_lr_gamma ** (r // schedule.local_lr_step_size)
    return base


def alpha_for_round(spec: AlphaSpec, r: int, rounds: int, s_r: Optional[float] = None) -> float:
    if spec.rule == AlphaRule.LINEAR_DECAY:
        return spec.start + (spec.end - spec.start) * r / max(1, rounds - 1)
    if spec.rule == AlphaRule.THEORY_OPTIMAL:
        if s_r is None:
            raise ConfigError("theory-optimal alpha needs the smoothness constant", field="schedule.alpha")
        return alpha_star(s_r)
    return spec.value


def sample_participants(K: int, p: float, round_index: int, stream: RandomStream) -> Tuple[int, ...]:
    """m = ⌊pK⌋ distinct clients, uniform over subsets, sorted by index."""
    m = participant_count(K, p)
    if m < 1:
        raise ConfigError(f"floor({p}*{K}) = 0 participants", field="participation")
    if m >= K:
        return tuple(range(K))
    rng = stream.at(round=round_index, purpose=Purpose.PARTICIPATION).generator()
    return tuple(sorted(int(i) for i in rng.choice(K, size=m, replace=False)))


def build_schedule(
    config: ExperimentConfig, r: int, participants: Tuple[int, ...], L: Optional[float] = None
) -> RoundSchedule:
    sched = config.schedule
    eta_r = local_lr_for_round(sched, r, config.rounds)
    s_r = None if L is None else eta_r * L * sched.local_steps
    return RoundSchedule(
        r=r,
        eta=sched.server_lr,
        eta_r=eta_r,
        alpha_r=alpha_for_round(sched.alpha, r, config.rounds, s_r),
        T=sched.local_steps,
        participants=participants,
        batch_size=sched.batch_size,
        momentum=sched.momentum,
    )


# ---------------------------------------------------------------------------
# Client and server steps
# ---------------------------------------------------------------------------

def local_sgd(
    task: FederatedTask,
    k: int,
    start: np.ndarray,
    sched: RoundSchedule,
    stream: RandomStream,
) -> Tuple[List[np.ndarray], Optional[np.ndarray]]:
    """T SGD steps from `start`; heavy-ball momentum restarts from zero each round."""
    batch = min(sched.batch_size, task.clients[k].n)
    w = start
    iterates = [start]
    buffer = np.zeros_like(start) if sched.momentum > 0 else None
    for t in range(sched.T):
        grad = stochastic_grad(task, k, w, batch, stream.at(round=sched.r, client=k, step=t, purpose=Purpose.MINIBATCH))
        if buffer is not None:
            buffer = sched.momentum * buffer + grad
            direction = buffer
        else:
            direction = grad
        w = w - sched.eta_r * direction
        if not np.all(np.isfinite(w)):
            raise DivergenceError(sched.r, k, t + 1)
        iterates.append(w)
    return iterates, buffer


def client_round(
    task: FederatedTask,
    k: int,
    w_r: np.ndarray,
    state: ClientState,
    sched: RoundSchedule,
    stream: RandomStream,
    compressor: CompressorSpec,
) -> Tuple[ClientMessage, ClientState, LocalTrace]:
    if k not in sched.participants:
        raise DomainError(f"client {k} is not sampled in round {sched.r}")
    if state.residual.shape != w_r.shape:
        raise DimensionError(f"client {k}: residual has shape {state.residual.shape}, model {w_r.shape}")

    e = state.residual
    alpha = sched.alpha_r
    start = w_r - alpha * e
    iterates, buffer = local_sgd(task, k, start, sched, stream)
    g = start - iterates[-1]
    u = (1.0 - alpha) * e + g
    try:
        compressed = compress(compressor, u)
    except NumericError as exc:
        raise DivergenceError(sched.r, k, sched.T, f"non-finite update ({exc})") from exc
    new_residual = residual(u, compressed)

    message = ClientMessage(
        client=k,
        compressed=compressed,
        raw_update_norm_sq=norm2_sq(u),
        residual_energy=norm2_sq(new_residual),
    )
    return message, ClientState(new_residual, buffer), LocalTrace(iterates, g)


def inactive_step(state: ClientState) -> ClientState:
    """Clients outside the sampled set keep their memory as is."""
    return state


def server_aggregate(messages: Sequence[ClientMessage], w_r: np.ndarray, eta: float) -> np.ndarray:
    """w_{r+1} = w_r − η·(1/m)·Σ C(u_k), summed in client-index order."""
    if not messages:
        raise ConfigError("no participating clients to aggregate", field="participation")
    ordered = sorted(messages, key=lambda msg: msg.client)
    c_bar = ordered_sum(msg.compressed.dense for msg in ordered) / len(ordered)
    return w_r - eta * c_bar


def run_round(
    task: FederatedTask,
    states: Sequence[ClientState],
    w_r: np.ndarray,
    sched: RoundSchedule,
    stream: RandomStream,
    compressor: CompressorSpec,
    executor: Optional[Executor] = None,
) -> Tuple[np.ndarray, List[ClientState], RoundTrace]:
    if len(states) != task.K:
        raise DimensionError(f"expected {task.K} client states, got {len(states)}")
    participants = tuple(sorted(sched.participants))
    m = len(participants)

    # residual means are taken before any client updates its memory
    e_tilde = ordered_sum(s.residual for s in states) / task.K
    e_bar = ordered_sum(states[k].residual for k in participants) / m

    def work(k: int):
        return client_round(task, k, w_r, states[k], sched, stream, compressor)

    results = list(executor.map(work, participants)) if executor else [work(k) for k in participants]

    messages = [msg for msg, _, _ in results]
    w_next = server_aggregate(messages, w_r, sched.eta)
    check_finite_or_diverge(w_next, sched)

    new_states = [inactive_step(s) for s in states]
    for k, (_, new_state, _) in zip(participants, results):
        new_states[k] = new_state

    trace = RoundTrace(
        r=sched.r,
        w_r=w_r,
        w_next=w_next,
        e_tilde=e_tilde,
        e_tilde_next=ordered_sum(s.residual for s in new_states) / task.K,
        e_bar=e_bar,
        g_bar=ordered_sum(t.update for _, _, t in results) / m,
        c_bar=ordered_sum(msg.compressed.dense for msg in messages) / m,
        participants=participants,
        K=task.K,
        residual_energies={msg.client: msg.residual_energy for msg in messages},
        local_traces={k: t for k, (_, _, t) in zip(participants, results)},
    )
    return w_next, new_states, trace


def check_finite_or_diverge(w: np.ndarray, sched: RoundSchedule) -> None:
    try:
        check_finite(w, "aggregated model")
    except NumericError as exc:
        raise DivergenceError(sched.r, -1, sched.T, str(exc)) from exc


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def initial_model(config: ExperimentConfig, dim: int) -> np.ndarray:
    if config.init_scale == 0.0:
        return np.zeros(dim)
    return config.init_scale * draw_gaussian(RandomStream(config.seed, purpose=Purpose.INIT), dim)


class Simulation:
    """Round-by-round driver holding w_r and every client's memory."""

    def __init__(
        self,
        config: ExperimentConfig,
        task: Optional[FederatedTask] = None,
        executor: Optional[Executor] = None,
    ):
        self.config = config
        self.task = task if task is not None else build_task(config.task, config.seed)
        self.executor = executor
        self.stream = RandomStream(config.seed)
        self.w = initial_model(config, self.task.dim)
        self.states = [ClientState.zeros(self.task.dim) for _ in range(self.task.K)]
        self.r = 0
        self._L: Optional[float] = None

    @property
    def L(self) -> float:
        if self._L is None:
            self._L = smoothness_constant(self.task, self.config.seed)
        return self._L

    def schedule(self) -> RoundSchedule:
        participants = sample_participants(self.task.K, self.config.participation, self.r, self.stream)
        needs_L = self.config.schedule.alpha.rule == AlphaRule.THEORY_OPTIMAL
        return build_schedule(self.config, self.r, participants, self.L if needs_L else None)

    def step(self, sched: Optional[RoundSchedule] = None) -> RoundTrace:
        sched = sched or self.schedule()
        self.w, self.states, trace = run_round(
            self.task, self.states, self.w, sched, self.stream, self.config.compressor, self.executor
        )
        self.r += 1
        return trace

    def freeze(self) -> FrozenState:
        return FrozenState(self.r, self.w.copy(), [s.copy() for s in self.states], self.schedule())
