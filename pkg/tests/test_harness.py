import csv

import pytest

from app.config import settings
from app.constants import (
    CONFIG_FILENAME,
    FAILURE_MARKER,
    METRICS_COLUMNS,
    METRICS_FILENAME,
    SUMMARY_FILENAME,
    RunStatus,
)
from app.core.errors import ConfigError, DivergenceError
from app.schemas.metrics import MetricsRecord
from app.services import harness
from app.services.compressors import uplink_bits
from app.services.harness import (
    emit_metrics,
    load_config,
    parse_config,
    parse_metrics,
    resolve_output_dir,
    rounds_to_threshold,
    run_experiment,
    run_replicates,
    save_config,
    sweep_alpha,
)
from app.services.protocol import Simulation

from tests.conftest import CONFIG_DIR


def test_minimal_config_takes_defaults():
    config = load_config(CONFIG_DIR / "minimal.yaml")
    assert config.schedule.server_lr == 1.0
    assert config.schedule.local_steps == 5
    assert config.schedule.alpha.value == 0.85
    assert config.participation == 1.0


@pytest.mark.parametrize("path", sorted(CONFIG_DIR.glob("*.yaml")), ids=lambda p: p.stem)
def test_shipped_configs_parse(path):
    config = load_config(path)
    assert config.rounds >= 1


def test_scalar_alpha_shorthand():
    config = parse_config({"task": {"dim": 10, "clients": 2}, "schedule": {"alpha": 0.3}})
    assert config.schedule.alpha.value == 0.3


def test_k_larger_than_dimension_is_rejected():
    with pytest.raises(ConfigError) as info:
        parse_config({"task": {"dim": 3, "clients": 2}, "compressor": {"k": 5}})
    assert "compressor.k" in str(info.value)


def test_unknown_key_names_field():
    with pytest.raises(ConfigError) as info:
        parse_config({"task": {"dim": 3, "clients": 2}, "schedule": {"lr": 0.1}})
    assert info.value.field == "schedule.lr"


def test_empty_participant_set_is_rejected():
    with pytest.raises(ConfigError):
        parse_config({"task": {"dim": 3, "clients": 5}, "participation": 0.1})


def test_yaml_error_reports_line(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("task:\n  dim: 3\n  clients: [1, 2\n")
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert "line" in str(info.value)


def test_save_and_load(make_config, tmp_path):
    config = make_config()
    save_config(config, tmp_path / "c.yaml")
    assert load_config(tmp_path / "c.yaml").model_dump() == config.model_dump()


def test_rounds_to_threshold():
    assert rounds_to_threshold([5.0, 2.0, 0.5, 0.1], 1.0) == 2
    assert rounds_to_threshold([5.0, 2.0], 1.0) is None


def test_run_writes_artifacts(make_config, tmp_path):
    config = make_config(rounds=4)
    summary = run_experiment(config, output_dir=tmp_path / "out")
    out = tmp_path / "out"
    assert summary.status == RunStatus.COMPLETED
    assert summary.rounds_completed == 4
    for name in (CONFIG_FILENAME, METRICS_FILENAME, SUMMARY_FILENAME):
        assert (out / name).exists()
    assert not (out / FAILURE_MARKER).exists()
    assert load_config(out / CONFIG_FILENAME).model_dump() == config.model_dump()

    records = parse_metrics(out / METRICS_FILENAME)
    assert [r.round for r in records] == [0, 1, 2, 3]
    per_round = config.participants * uplink_bits(config.compressor, config.task.dim)
    assert [r.uplink_bits_cum for r in records] == [per_round * (r + 1) for r in range(4)]
    assert summary.uplink_bits_cum == 4 * per_round
    assert records[0].residual_energy_mean == 0.0
    assert all(r.wall_time_ms == 0 for r in records)


def test_zero_rounds_writes_header_only(make_config, tmp_path):
    summary = run_experiment(make_config(rounds=0), output_dir=tmp_path)
    with (tmp_path / METRICS_FILENAME).open() as fh:
        rows = list(csv.reader(fh))
    assert rows == [list(METRICS_COLUMNS)]
    assert summary.status == RunStatus.COMPLETED
    assert summary.rounds_completed == 0
    assert summary.uplink_bits_cum == 0


def test_worker_count_does_not_change_metrics(make_config, tmp_path):
    config = make_config(rounds=6)
    run_experiment(config, workers=1, output_dir=tmp_path / "a")
    run_experiment(config, workers=4, output_dir=tmp_path / "b")
    assert (tmp_path / "a" / METRICS_FILENAME).read_bytes() == (tmp_path / "b" / METRICS_FILENAME).read_bytes()


def test_divergence_keeps_rows_and_marks_failure(make_config, tmp_path, monkeypatch):
    original = Simulation.step

    def failing_step(self, sched=None):
        if self.r == 3:
            raise DivergenceError(3, 0, 1)
        return original(self, sched)

    monkeypatch.setattr(Simulation, "step", failing_step)
    summary = run_experiment(make_config(rounds=10), output_dir=tmp_path)
    assert summary.status == RunStatus.DIVERGED
    assert summary.rounds_completed == 3
    assert "round=3" in summary.failure
    assert (tmp_path / FAILURE_MARKER).exists()
    assert len(parse_metrics(tmp_path / METRICS_FILENAME)) == 3


def test_rerun_clears_stale_failure_marker(make_config, tmp_path):
    (tmp_path / FAILURE_MARKER).write_text("old\n")
    run_experiment(make_config(rounds=1), output_dir=tmp_path)
    assert not (tmp_path / FAILURE_MARKER).exists()


def test_replicates_use_consecutive_seeds(make_config, tmp_path):
    summaries = run_replicates(make_config(rounds=2, replicates=3, seed=10), output_dir=tmp_path)
    assert [s.seed for s in summaries] == [10, 11, 12]
    assert all((tmp_path / f"seed_{s}" / METRICS_FILENAME).exists() for s in (10, 11, 12))


def test_settings_override_output_dir(make_config, tmp_path, monkeypatch):
    monkeypatch.setattr(settings, "output_dir", tmp_path / "env")
    assert resolve_output_dir(make_config()) == tmp_path / "env"
    assert resolve_output_dir(make_config(), tmp_path / "cli") == tmp_path / "cli"


def test_sweep_with_no_alphas(make_config, tmp_path):
    assert sweep_alpha(make_config(), [], output_dir=tmp_path) == []
    assert not (tmp_path / harness.SWEEP_TABLE_FILENAME).exists()


def test_sweep_rejects_alpha_outside_unit_interval(make_config, tmp_path):
    with pytest.raises(ConfigError):
        sweep_alpha(make_config(), [0.5, 1.5], output_dir=tmp_path)


def test_sweep_cells_match_single_runs(make_config, tmp_path):
    config = make_config(rounds=3)
    summaries = sweep_alpha(config, [0.0, 0.85], output_dir=tmp_path / "sweep")
    assert [s.alpha for s in summaries] == [0.0, 0.85]
    single = run_experiment(config.with_alpha(0.85), output_dir=tmp_path / "single")
    assert summaries[1].final_f == single.final_f
    assert (tmp_path / "sweep" / "alpha_0.85" / METRICS_FILENAME).exists()
    with (tmp_path / "sweep" / harness.SWEEP_TABLE_FILENAME).open() as fh:
        rows = list(csv.DictReader(fh))
    assert [row["alpha"] for row in rows] == ["0", "0.84999999999999998"]


def test_emitted_metrics_parse_back(tmp_path):
    records = [
        MetricsRecord(round=0, f_w=1.0 / 3.0, grad_norm_sq=2.5e-17, residual_energy_mean=0.0, uplink_bits_cum=39),
        MetricsRecord(round=1, f_w=0.1, grad_norm_sq=1e300, residual_energy_mean=7.0, mismatch=0.25, uplink_bits_cum=78),
    ]
    path = emit_metrics(records, tmp_path / METRICS_FILENAME)
    assert [r.model_dump() for r in parse_metrics(path)] == [r.model_dump() for r in records]
