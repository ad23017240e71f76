"""Experiment configuration, orchestration and persistence."""
import csv
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import IO, Iterable, List, Optional, Sequence

import yaml
from pydantic import ValidationError

from app.config import settings
from app.constants import (
    CONFIG_FILENAME,
    FAILURE_MARKER,
    METRICS_COLUMNS,
    METRICS_FILENAME,
    SUMMARY_FILENAME,
    AlphaRule,
    RunStatus,
)
from app.core.errors import ConfigError, DivergenceError, SimulatorError
from app.schemas.experiment import ExperimentConfig, RunSummary
from app.schemas.metrics import MetricsRecord
from app.services.diagnostics import (
    accumulate_comm,
    draw_probe_batch,
    gradient_mismatch,
    residual_energy_mean,
    snapshot,
    virtual_identity_residual,
)
from app.services.numerics import norm2_sq
from app.services.objectives import global_grad, objective
from app.services.protocol import Simulation

logger = logging.getLogger(__name__)

SWEEP_TABLE_FILENAME = "alpha_sweep.csv"
SWEEP_COLUMNS = (
    "alpha",
    "status",
    "rounds_completed",
    "rounds_to_threshold",
    "final_f",
    "final_grad_norm_sq",
    "min_grad_norm_sq",
    "mean_mismatch",
    "final_residual_energy",
    "uplink_bits_cum",
)


# ---------------------------------------------------------------------------
# Config I/O
# ---------------------------------------------------------------------------

def parse_config(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        field = ".".join(str(part) for part in err["loc"]) or None
        message = err["msg"].removeprefix("Value error, ")
        raise ConfigError(message, field=field) from exc


def load_config(path: Path) -> ExperimentConfig:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}" if mark is not None else "unknown line"
        raise ConfigError(f"{path}: YAML parse error at {where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return parse_config(data)


def dump_config(config: ExperimentConfig) -> str:
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True)


def save_config(config: ExperimentConfig, path: Path) -> None:
    Path(path).write_text(dump_config(config))


# ---------------------------------------------------------------------------
# Metrics files
# ---------------------------------------------------------------------------

def format_value(value) -> str:
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


class MetricsWriter:
    """Single writer of one run's metrics file; every row is flushed whole."""

    def __init__(self, stream: IO[str]):
        self._stream = stream
        self._writer = csv.writer(stream, lineterminator="\n")
        self._writer.writerow(METRICS_COLUMNS)
        self._stream.flush()

    def write(self, record: MetricsRecord) -> None:
        row = record.model_dump()
        self._writer.writerow([format_value(row[c]) for c in METRICS_COLUMNS])
        self._stream.flush()


def emit_metrics(records: Iterable[MetricsRecord], path: Path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = MetricsWriter(fh)
        for record in records:
            writer.write(record)
    return path


def parse_metrics(path: Path) -> List[MetricsRecord]:
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ConfigError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [MetricsRecord.model_validate(row) for row in reader]


# ---------------------------------------------------------------------------
# Runs
# ---------------------------------------------------------------------------

def resolve_output_dir(config: ExperimentConfig, output_dir: Optional[Path] = None) -> Path:
    if output_dir is not None:
        return Path(output_dir)
    if settings.output_dir is not None:
        return Path(settings.output_dir)
    return Path(config.output_dir)


def constant_alpha(config: ExperimentConfig) -> Optional[float]:
    alpha = config.schedule.alpha
    return alpha.value if alpha.rule == AlphaRule.CONSTANT else None


def rounds_to_threshold(grad_norms: Sequence[float], threshold: float) -> Optional[int]:
    for r, value in enumerate(grad_norms):
        if value <= threshold:
            return r
    return None


def write_summary(summary: RunSummary, out_dir: Path) -> None:
    (out_dir / SUMMARY_FILENAME).write_text(yaml.safe_dump(summary.model_dump(mode="json"), sort_keys=False))


def run_experiment(
    config: ExperimentConfig,
    workers: Optional[int] = None,
    output_dir: Optional[Path] = None,
) -> RunSummary:
    """Run `config.rounds` rounds, streaming one metrics row per completed round.

    A diverged run keeps the rows written so far and leaves a failure marker
    next to them.
    """
    workers = workers or settings.workers
    out_dir = resolve_output_dir(config, output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / FAILURE_MARKER).unlink(missing_ok=True)
    save_config(config, out_dir / CONFIG_FILENAME)
    metrics_path = out_dir / METRICS_FILENAME

    logger.info(f"Starting run seed={config.seed} rounds={config.rounds} -> {out_dir}")
    executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        sim = Simulation(config, executor=executor)
        task = sim.task
        probes = draw_probe_batch(task, config.probe_batch_size, config.seed)
        downlink = task.K if config.count_downlink else 0
        grad_norms: List[float] = []
        mismatches: List[float] = []
        bits = 0
        status, failure = RunStatus.COMPLETED, None

        with metrics_path.open("w", newline="") as fh:
            writer = MetricsWriter(fh)
            for r in range(config.rounds):
                started = time.perf_counter()
                sched = sim.schedule()
                record = snapshot(
                    task,
                    r,
                    sim.w,
                    sim.states,
                    mismatch=gradient_mismatch(task, sim.w, sim.states, sched.alpha_r, probes),
                    uplink_bits_cum=bits,
                )
                try:
                    trace = sim.step(sched)
                except DivergenceError as exc:
                    status, failure = RunStatus.DIVERGED, str(exc)
                    logger.warning(f"Run seed={config.seed} diverged: {exc}")
                    break
                record = accumulate_comm(record, config.compressor, task.dim, len(sched.participants), downlink)
                bits = record.uplink_bits_cum
                defect = virtual_identity_residual(trace, sched.eta, sched.alpha_r, trace.participation)
                wall = int((time.perf_counter() - started) * 1000) if config.record_wall_time else 0
                record = record.model_copy(update={"virtual_identity_residual": defect, "wall_time_ms": wall})
                writer.write(record)
                grad_norms.append(record.grad_norm_sq)
                mismatches.append(record.mismatch)
                logger.debug(f"round {r}: f={record.f_w:.6g} grad_sq={record.grad_norm_sq:.6g}")
    finally:
        if executor is not None:
            executor.shutdown()

    if failure is not None:
        (out_dir / FAILURE_MARKER).write_text(failure + "\n")
    # a failed round leaves sim.w at the last finite iterate
    final_f = objective(task, sim.w)
    final_grad = norm2_sq(global_grad(task, sim.w))
    all_norms = grad_norms + [final_grad]

    summary = RunSummary(
        seed=config.seed,
        alpha=constant_alpha(config),
        status=status,
        rounds_completed=len(grad_norms),
        final_f=final_f,
        final_grad_norm_sq=final_grad,
        min_grad_norm_sq=min(all_norms) if all_norms else None,
        rounds_to_threshold=rounds_to_threshold(all_norms, config.threshold),
        threshold=config.threshold,
        uplink_bits_cum=bits,
        mean_mismatch=sum(mismatches) / len(mismatches) if mismatches else 0.0,
        final_residual_energy=residual_energy_mean(sim.states),
        metrics_path=str(metrics_path),
        failure=failure,
    )
    write_summary(summary, out_dir)
    logger.info(f"Finished run seed={config.seed}: status={status.value} rounds={summary.rounds_completed}")
    return summary


def run_replicates(
    config: ExperimentConfig, workers: Optional[int] = None, output_dir: Optional[Path] = None
) -> List[RunSummary]:
    """Seeds seed … seed+N−1, each into `<output_dir>/seed_<s>/`."""
    workers = workers or settings.workers
    base = resolve_output_dir(config, output_dir)
    if config.replicates == 1:
        return [run_experiment(config, workers, base)]
    seeds = [config.seed + i for i in range(config.replicates)]

    def one(seed: int) -> RunSummary:
        return run_experiment(config.with_seed(seed), 1, base / f"seed_{seed}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(one, seeds))
    return [one(s) for s in seeds]


def failed_summary(config: ExperimentConfig, alpha: float, exc: Exception) -> RunSummary:
    return RunSummary(
        seed=config.seed,
        alpha=alpha,
        status=RunStatus.FAILED,
        threshold=config.threshold,
        failure=str(exc),
    )


def sweep_alpha(
    config: ExperimentConfig,
    alphas: Sequence[float],
    workers: Optional[int] = None,
    output_dir: Optional[Path] = None,
) -> List[RunSummary]:
    """One run per α with the config's seed; failures are recorded per cell."""
    if not alphas:
        return []
    for a in alphas:
        if not 0.0 <= a <= 1.0 or math.isnan(a):
            raise ConfigError(f"alpha {a} outside [0, 1]", field="alphas")
    workers = workers or settings.workers
    base = resolve_output_dir(config, output_dir)

    def cell(alpha: float) -> RunSummary:
        logger.info(f"Sweep cell alpha={alpha}")
        try:
            return run_experiment(config.with_alpha(alpha), 1, base / f"alpha_{alpha:g}")
        except SimulatorError as exc:
            logger.warning(f"Sweep cell alpha={alpha} failed: {exc}")
            return failed_summary(config, alpha, exc)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            summaries = list(pool.map(cell, alphas))
    else:
        summaries = [cell(a) for a in alphas]
    write_sweep_table(summaries, base / SWEEP_TABLE_FILENAME)
    return summaries


def write_sweep_table(summaries: Sequence[RunSummary], path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        for s in summaries:
            row = s.model_dump(mode="json")
            writer.writerow(["" if row[c] is None else format_value(row[c]) for c in SWEEP_COLUMNS])
    return path
