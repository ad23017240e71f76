import numpy as np
import pytest

from app.constants import CompressorFamily, QuadraticPreset, TaskKind
from app.core.errors import AccountingError
from app.models.models import ClientState
from app.schemas.experiment import CompressorSpec, TaskSpec
from app.schemas.metrics import MetricsRecord
from app.services.diagnostics import (
    accumulate_comm,
    draw_probe_batch,
    gradient_mismatch,
    round_bits,
    snapshot,
    virtual_identity_residual,
)
from app.services.harness import load_config, run_experiment
from app.services.numerics import norm2_sq
from app.services.objectives import build_task
from app.services.protocol import Simulation
from app.services.verification import max_identity_defect

from tests.conftest import CONFIG_DIR

IDENTITY = CompressorSpec(family=CompressorFamily.IDENTITY)
TASK = TaskSpec(kind=TaskKind.QUADRATIC, preset=QuadraticPreset.RANDOM, clients=3, dim=6, samples_per_client=8)


def random_states(K: int, d: int, seed: int = 0):
    rng = np.random.default_rng(seed)
    return [ClientState(rng.standard_normal(d)) for _ in range(K)]


def test_mismatch_zero_without_residuals():
    task = build_task(TASK, seed=0)
    states = [ClientState.zeros(task.dim) for _ in range(task.K)]
    probes = draw_probe_batch(task, None, 0)
    assert gradient_mismatch(task, np.ones(task.dim), states, 0.85, probes) == 0.0


def test_mismatch_zero_without_shift():
    task = build_task(TASK, seed=0)
    probes = draw_probe_batch(task, None, 0)
    assert gradient_mismatch(task, np.ones(task.dim), random_states(task.K, task.dim), 0.0, probes) == 0.0


def test_mismatch_matches_hessian_closed_form():
    task = build_task(TASK, seed=1)
    states = random_states(task.K, task.dim, seed=1)
    alpha = 0.6
    expected = sum(
        norm2_sq(alpha * (c.features.T @ c.features) @ s.residual) for c, s in zip(task.clients, states)
    ) / task.K
    value = gradient_mismatch(task, np.zeros(task.dim), states, alpha, draw_probe_batch(task, None, 1))
    assert value == pytest.approx(expected, rel=1e-8)


def test_probe_batch_is_fixed_per_seed():
    task = build_task(TASK, seed=0)
    a, b = draw_probe_batch(task, 3, 7), draw_probe_batch(task, 3, 7)
    for rows_a, rows_b in zip(a, b):
        assert np.array_equal(rows_a, rows_b)
        assert len(set(rows_a.tolist())) == 3


def test_accounting_examples():
    assert round_bits(CompressorSpec(k=10), 1000, 10) == 4200
    assert round_bits(IDENTITY, 100, 100) == 320_000
    assert round_bits(CompressorSpec(k=2), 2, 1) == 66


def test_accounting_is_additive():
    spec = CompressorSpec(k=10)
    record = MetricsRecord(round=0, f_w=0.0, grad_norm_sq=0.0, residual_energy_mean=0.0)
    first = accumulate_comm(record, spec, 1000, 10)
    second = accumulate_comm(first, spec, 1000, 7)
    assert second.uplink_bits_cum == 4200 + 7 * 420


def test_downlink_is_counted_when_asked():
    assert round_bits(CompressorSpec(k=10), 1000, 10, downlink_clients=100) == 4200 + 100 * 1000 * 32


def test_accounting_overflow():
    record = MetricsRecord(round=5, f_w=0.0, grad_norm_sq=0.0, residual_energy_mean=0.0, uplink_bits_cum=2**63 - 100)
    with pytest.raises(AccountingError):
        accumulate_comm(record, IDENTITY, 100, 1)


def test_identity_compressor_has_no_identity_defect(make_config):
    config = make_config(compressor=IDENTITY, rounds=5)
    sim = Simulation(config)
    for _ in range(config.rounds):
        sched = sim.schedule()
        trace = sim.step(sched)
        assert virtual_identity_residual(trace, sched.eta, sched.alpha_r, 1.0) == 0.0


@pytest.mark.parametrize("participation", [1.0, 0.5])
def test_identity_defect_within_roundoff(make_config, participation):
    config = make_config(rounds=20, participation=participation)
    assert max_identity_defect(config) <= 1e-9


def test_snapshot_describes_start_of_round(make_config):
    config = make_config()
    sim = Simulation(config)
    record = snapshot(sim.task, 0, sim.w, sim.states)
    assert record.round == 0
    assert record.residual_energy_mean == 0.0
    assert record.grad_norm_sq > 0.0


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.yaml")), ids=lambda p: p.stem)
def test_identity_defect_on_shipped_configs(path):
    config = load_config(path).model_copy(update={"rounds": 10})
    assert max_identity_defect(config) <= 1e-9


@pytest.mark.slow
def test_step_ahead_mismatch_below_full_preview(tmp_path):
    config = load_config(CONFIG_DIR / "heterogeneous_quadratic.yaml").model_copy(update={"rounds": 50})
    partial, full = [], []
    for seed in range(5):
        cfg = config.with_seed(seed)
        partial.append(run_experiment(cfg.with_alpha(0.85), output_dir=tmp_path / f"a{seed}").mean_mismatch)
        full.append(run_experiment(cfg.with_alpha(1.0), output_dir=tmp_path / f"b{seed}").mean_mismatch)
    assert np.median(partial) <= np.median(full)
