"""Command-line entry point: ``python -m app.cli <command> ...``."""
from functools import wraps
from pathlib import Path
from typing import List, Optional

import click
import yaml

from app.config import settings
from app.constants import ALPHA_GRID, RunStatus
from app.core.errors import SimulatorError
from app.core.logging import configure_logging
from app.services.bounds import theory_params_for
from app.services.harness import load_config, run_replicates, sweep_alpha
from app.services.objectives import build_task, dump_task, partition_stats
from app.services.theory import constants_report
from app.services.verification import run_suite


def _echo_yaml(data) -> None:
    click.echo(yaml.safe_dump(data, sort_keys=False).rstrip())


def surface_errors(fn):
    """Report simulator errors as a one-line message with exit code 1."""

    @wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except SimulatorError as exc:
            raise click.ClickException(str(exc)) from exc

    return wrapper


def parse_alphas(text: str) -> List[float]:
    try:
        return [float(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise click.BadParameter(f"expected comma-separated numbers, got {text!r}") from exc


@click.group()
@click.option("--workers", type=int, default=None, help="Worker threads (never changes results).")
@click.option("--log-level", default=None, help="Logging level, defaults to SAPEF_LOG_LEVEL.")
@click.pass_context
def main(ctx: click.Context, workers: Optional[int], log_level: Optional[str]):
    """Step-ahead partial error feedback simulator and verification suite."""
    configure_logging(log_level or settings.log_level)
    ctx.ensure_object(dict)
    ctx.obj["workers"] = workers or settings.workers


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.pass_context
@surface_errors
def run(ctx: click.Context, config_path: Path, output_dir: Optional[Path]):
    """Run an experiment (and its replicates)."""
    config = load_config(config_path)
    summaries = run_replicates(config, ctx.obj["workers"], output_dir)
    _echo_yaml([s.model_dump(mode="json") for s in summaries])
    if any(s.status != RunStatus.COMPLETED for s in summaries):
        ctx.exit(1)


@main.command("sweep-alpha")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--alphas", default=",".join(str(a) for a in ALPHA_GRID), show_default=True)
@click.option("--output-dir", type=click.Path(file_okay=False, path_type=Path), default=None)
@click.pass_context
@surface_errors
def sweep_alpha_command(ctx: click.Context, config_path: Path, alphas: str, output_dir: Optional[Path]):
    """One run per step-ahead coefficient, shared seed."""
    config = load_config(config_path)
    summaries = sweep_alpha(config, parse_alphas(alphas), ctx.obj["workers"], output_dir)
    click.echo(f"{'alpha':>6} {'status':>10} {'rounds_to_thr':>14} {'final_grad_sq':>14} {'mismatch':>12}")
    for s in summaries:
        rtt = "-" if s.rounds_to_threshold is None else str(s.rounds_to_threshold)
        grad = "-" if s.final_grad_norm_sq is None else f"{s.final_grad_norm_sq:.4g}"
        click.echo(f"{s.alpha:>6g} {s.status.value:>10} {rtt:>14} {grad:>14} {s.mean_mismatch:>12.4g}")


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--probes", default=50, show_default=True, help="Probe points for the dissimilarity fit.")
@surface_errors
def constants(config_path: Path, probes: int):
    """Print ρ, α*, ρ_min, Θ, Θ_PP and the precondition flags for a config."""
    config = load_config(config_path)
    task = build_task(config.task, config.seed)
    params = theory_params_for(task, config, probes=probes)
    _echo_yaml({"params": params.model_dump(), **constants_report(params).model_dump()})


@main.command()
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.option("--empirical", is_flag=True, help="Also run the early-acceleration and alpha-sweep checks.")
@click.option("--lemma-samples", default=500, show_default=True)
@click.pass_context
@surface_errors
def verify(ctx: click.Context, config_path: Path, empirical: bool, lemma_samples: int):
    """Run the invariant and bound suite; exit 1 on any failed check."""
    config = load_config(config_path)
    report = run_suite(config, empirical=empirical, lemma_samples=lemma_samples)
    for check in report.checks:
        mark = "PASS" if check.passed else ("INFO" if check.informational else "FAIL")
        click.echo(f"[{mark}] {check.name}: {check.detail}")
    if not report.passed:
        ctx.exit(1)


@main.command("partition-stats")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@surface_errors
def partition_stats_command(config_path: Path):
    """Per-client label histograms of a Dirichlet task."""
    config = load_config(config_path)
    _echo_yaml(partition_stats(build_task(config.task, config.seed)).model_dump())


@main.command("dump-task")
@click.argument("config_path", type=click.Path(exists=True, dir_okay=False, path_type=Path))
@click.argument("out_path", type=click.Path(dir_okay=False, path_type=Path))
@surface_errors
def dump_task_command(config_path: Path, out_path: Path):
    """Write the generated task as JSON."""
    config = load_config(config_path)
    dump_task(build_task(config.task, config.seed), out_path)
    click.echo(f"wrote {out_path}")


if __name__ == "__main__":
    main()
