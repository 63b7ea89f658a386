from __future__ import annotations

import math
from pathlib import Path
from typing import Annotated

import typer
from massfuse.errors import ConfigError
from massfuse.harness import RunReport, load_config, run_simulation, write_report
from rich.console import Console
from rich.table import Table

from massfuse_cli.output import EXIT_ERROR_RATE, emit_error, emit_success, err_console, is_json_mode

console = Console()


def simulate(
    ctx: typer.Context,
    config: Annotated[Path, typer.Option("--config", "-c", help="Simulation config (JSON or YAML)")],
    out: Annotated[Path, typer.Option("--out", "-o", help="Directory for report.csv, report.txt and config.json")],
    workers: Annotated[int | None, typer.Option(help="Worker processes (overrides the config)", min=1)] = None,
) -> None:
    """Run a Monte Carlo study and write its report."""
    try:
        sim = load_config(config)
        if workers is not None:
            sim = sim.model_copy(update={"workers": workers})
        # sample-size checks live on the per-scenario model
        sim.scenario_configs()
    except ConfigError as e:
        emit_error(ctx, e)
    except ValueError as e:
        emit_error(ctx, ConfigError(str(e)))

    if not is_json_mode(ctx):
        with console.status(f"Running {sim.replicates} replicates x {len(sim.scenarios)} scenario(s)..."):
            report = run_simulation(sim)
    else:
        report = run_simulation(sim)
    try:
        paths = write_report(report, out)
    except OSError as e:
        emit_error(ctx, e, action="Choose an --out directory you can write to")

    if is_json_mode(ctx):
        emit_success(
            ctx,
            {
                "files": [str(p) for p in paths],
                "error_rate": report.error_rate,
                "wall_time": report.wall_time,
                "cells": [c.model_dump(mode="json") for c in report.cells],
            },
        )
    else:
        _print_report_table(report)
        console.print(f"[green]Report written to {out}[/green]")

    if report.error_rate > sim.max_error_rate:
        err_console.print(
            f"[red]Estimator failure rate {report.error_rate:.1%} exceeds the threshold {sim.max_error_rate:.1%}[/red]"
        )
        raise typer.Exit(EXIT_ERROR_RATE)


def _fmt(value: float) -> str:
    return "nan" if math.isnan(value) else f"{100 * value:.1f}"


def _print_report_table(report: RunReport) -> None:
    table = Table(title=f"{report.experiment} study (x100)")
    table.add_column("Scenario", style="cyan")
    table.add_column("Target")
    table.add_column("Estimator")
    table.add_column("Bias", justify="right")
    table.add_column("S.E.", justify="right")
    table.add_column("C.R.", justify="right")
    table.add_column("Errors", justify="right", style="dim")
    for cell in report.cells:
        table.add_row(
            cell.scenario,
            cell.target,
            str(cell.estimator),
            _fmt(cell.bias),
            _fmt(cell.mc_se),
            _fmt(cell.coverage),
            str(cell.errors),
        )
    console.print(table)
