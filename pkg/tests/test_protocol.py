import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np
import pytest

from app.constants import AlphaRule, CompressorFamily, LocalLrDecay
from app.core.errors import ConfigError, DivergenceError, DomainError
from app.models.models import ClientMessage, ClientState, CompressedUpdate, RoundSchedule
from app.schemas.experiment import AlphaSpec, CompressorSpec, ScheduleSpec
from app.services.numerics import RandomStream
from app.services.protocol import (
    Simulation,
    alpha_for_round,
    client_round,
    inactive_step,
    local_lr_for_round,
    local_sgd,
    run_round,
    sample_participants,
    server_aggregate,
)
from app.services.verification import reduction_config, reference_trajectory, trajectory

from tests.conftest import shifted_identity_task

IDENTITY = CompressorSpec(family=CompressorFamily.IDENTITY)


def schedule(**overrides) -> RoundSchedule:
    data = dict(r=0, eta=1.0, eta_r=0.1, alpha_r=0.5, T=2, participants=(0, 1), batch_size=2)
    data.update(overrides)
    return RoundSchedule(**data)


def message(client: int, dense) -> ClientMessage:
    dense = np.asarray(dense, dtype=float)
    return ClientMessage(client, CompressedUpdate(dense, int(np.count_nonzero(dense)), 0), 0.0, 0.0)


def test_aggregate_example():
    w = server_aggregate([message(0, [2.0, 0.0]), message(1, [0.0, 2.0])], np.zeros(2), 1.0)
    assert np.array_equal(w, [-1.0, -1.0])


def test_aggregate_of_zero_messages_keeps_model():
    w = np.array([0.3, -0.7])
    assert np.array_equal(server_aggregate([message(0, [0.0, 0.0])], w, 1.0), w)


def test_aggregate_needs_participants():
    with pytest.raises(ConfigError):
        server_aggregate([], np.zeros(2), 1.0)


def test_aggregate_ignores_message_order():
    msgs = [message(k, np.random.default_rng(k).standard_normal(4)) for k in range(5)]
    w = np.ones(4)
    assert np.array_equal(server_aggregate(msgs, w, 0.5), server_aggregate(msgs[::-1], w, 0.5))


def test_inactive_client_keeps_state():
    state = ClientState(np.array([1.0, 2.0]))
    assert inactive_step(state) is state


def test_identity_compressor_clears_residual(two_client_task):
    state = ClientState(np.array([0.4, -0.2]))
    for alpha in (0.0, 0.5, 1.0):
        _, new_state, _ = client_round(
            two_client_task, 0, np.ones(2), state, schedule(alpha_r=alpha), RandomStream(0), IDENTITY
        )
        assert np.array_equal(new_state.residual, np.zeros(2))


def test_fixed_point_at_client_minimizer(two_client_task):
    w = np.array([1.0, 0.0])  # minimizer of client 0
    msg, state, trace = client_round(
        two_client_task, 0, w, ClientState.zeros(2), schedule(T=1, alpha_r=0.85), RandomStream(0), CompressorSpec(k=1)
    )
    assert np.array_equal(trace.update, np.zeros(2))
    assert np.array_equal(msg.compressed.dense, np.zeros(2))
    assert np.array_equal(state.residual, np.zeros(2))


def test_step_ahead_preview_start(two_client_task):
    e = np.array([0.2, 0.4])
    w = np.array([1.0, 1.0])
    _, _, trace = client_round(
        two_client_task, 0, w, ClientState(e), schedule(alpha_r=0.5), RandomStream(0), IDENTITY
    )
    assert np.array_equal(trace.iterates[0], w - 0.5 * e)
    assert len(trace.iterates) == 3


def test_unsampled_client_is_rejected(two_client_task):
    with pytest.raises(DomainError):
        client_round(
            two_client_task, 1, np.zeros(2), ClientState.zeros(2), schedule(participants=(0,)), RandomStream(0), IDENTITY
        )


def test_divergence_reports_location():
    task = shifted_identity_task(d=2)
    with pytest.raises(DivergenceError) as info:
        client_round(
            task, 0, np.array([1e300, 0.0]), ClientState.zeros(2), schedule(eta_r=1e10, T=3, r=4), RandomStream(0), IDENTITY
        )
    assert info.value.round == 4
    assert info.value.client == 0


def test_partial_round_leaves_inactive_residuals(two_client_task):
    states = [ClientState(np.array([1.0, 0.0])), ClientState(np.array([0.0, 1.0]))]
    _, new_states, trace = run_round(
        two_client_task, states, np.zeros(2), schedule(participants=(1,)), RandomStream(0), CompressorSpec(k=1)
    )
    assert new_states[0] is states[0]
    assert trace.participants == (1,)
    assert trace.participation == 0.5


def test_sample_participants_full():
    assert sample_participants(7, 1.0, 3, RandomStream(0)) == tuple(range(7))


def test_sample_participants_size_and_distinct():
    chosen = sample_participants(100, 0.1, 0, RandomStream(0))
    assert len(chosen) == 10
    assert len(set(chosen)) == 10
    assert list(chosen) == sorted(chosen)


def test_sample_participants_depends_on_round():
    stream = RandomStream(0)
    rounds = {sample_participants(100, 0.1, r, stream) for r in range(5)}
    assert len(rounds) > 1


def test_sample_participants_empty_set():
    with pytest.raises(ConfigError):
        sample_participants(5, 0.1, 0, RandomStream(0))


def test_local_lr_schedules():
    cosine = ScheduleSpec(local_lr=0.1, local_lr_decay=LocalLrDecay.COSINE)
    assert local_lr_for_round(cosine, 0, 100) == pytest.approx(0.1)
    assert local_lr_for_round(cosine, 50, 100) == pytest.approx(0.05)
    step = ScheduleSpec(local_lr=0.1, local_lr_decay=LocalLrDecay.STEP, local_lr_step_size=10, local_lr_gamma=0.5)
    assert local_lr_for_round(step, 25, 100) == pytest.approx(0.025)


def test_alpha_rules():
    linear = AlphaSpec(rule=AlphaRule.LINEAR_DECAY, start=1.0, end=0.5)
    assert alpha_for_round(linear, 0, 11) == 1.0
    assert alpha_for_round(linear, 10, 11) == pytest.approx(0.5)
    optimal = AlphaSpec(rule=AlphaRule.THEORY_OPTIMAL)
    assert alpha_for_round(optimal, 0, 10, s_r=0.125) == pytest.approx(1 / 1.1875)
    with pytest.raises(ConfigError):
        alpha_for_round(optimal, 0, 10)


def same(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def test_alpha_zero_is_error_feedback(make_config):
    base = reduction_config(make_config())
    assert same(trajectory(base.with_alpha(0.0)), reference_trajectory(base, "ef"))


def test_alpha_one_is_full_step_ahead(make_config):
    base = reduction_config(make_config())
    assert same(trajectory(base.with_alpha(1.0)), reference_trajectory(base, "saef"))


@pytest.mark.parametrize("alpha", [0.0, 0.85, 1.0])
def test_identity_compressor_is_fedavg(make_config, alpha):
    base = reduction_config(make_config()).model_copy(update={"compressor": IDENTITY})
    assert same(trajectory(base.with_alpha(alpha)), reference_trajectory(base, "fedavg"))


def test_threads_do_not_change_results(make_config):
    config = make_config(rounds=4)
    serial = Simulation(config)
    with ThreadPoolExecutor(max_workers=4) as pool:
        threaded = Simulation(config, executor=pool)
        for _ in range(config.rounds):
            serial.step()
            threaded.step()
    assert np.array_equal(serial.w, threaded.w)
    for a, b in zip(serial.states, threaded.states):
        assert np.array_equal(a.residual, b.residual)


def test_theory_optimal_alpha_uses_smoothness(make_config):
    config = make_config()
    config = config.model_copy(
        update={"schedule": config.schedule.model_copy(update={"alpha": AlphaSpec(rule=AlphaRule.THEORY_OPTIMAL)})}
    )
    sim = Simulation(config)
    sched = sim.schedule()
    s = sched.eta_r * sim.L * sched.T
    assert sched.alpha_r == pytest.approx(1.0 / (1.0 + 12.0 * s**2))
    assert not math.isnan(sched.alpha_r)


def test_local_sgd_heavy_ball(two_client_task):
    start = np.array([2.0, 1.0])
    iterates, buffer = local_sgd(two_client_task, 0, start, schedule(momentum=0.5), RandomStream(0))
    assert np.allclose(iterates[1], [1.9, 0.9])
    assert np.allclose(buffer, [1.4, 1.4])
    assert np.allclose(iterates[2], [1.76, 0.76])

    plain, no_buffer = local_sgd(two_client_task, 0, start, schedule(), RandomStream(0))
    assert no_buffer is None
    assert np.allclose(plain[2], [1.81, 0.81])
