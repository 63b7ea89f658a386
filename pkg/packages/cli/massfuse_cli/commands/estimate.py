from __future__ import annotations

from pathlib import Path
from typing import Annotated

import typer
from massfuse.designs import read_strata_csv
from massfuse.errors import MassfuseError
from massfuse.estimators import EstimationInputs, estimate_conditional_mean
from massfuse.estimators import estimate as run_estimator
from massfuse.frame import FrameSchema, g_label, parse_g, read_big_sample_csv, read_sample_csv
from massfuse.gam import GamConfig
from massfuse.report import EstimateReport, Method
from rich.console import Console
from rich.table import Table

from massfuse_cli.output import emit_error, emit_success, is_json_mode

console = Console()

_DESIGNS = ("srswor", "stratified")


def _names(value: str | None) -> list[str]:
    return [v.strip() for v in (value or "").split(",") if v.strip()]


def estimate(
    ctx: typer.Context,
    method: Annotated[str, typer.Option("--method", "-m", help="HT, IPW, DR, NNI, KNN, GAM or RC")],
    a_file: Annotated[Path, typer.Option("--a", help="Sample A CSV (with a pi column)")],
    b_file: Annotated[Path, typer.Option("--b", help="Sample B CSV")],
    covariates: Annotated[str, typer.Option(help="Comma-separated covariate columns")],
    outcomes: Annotated[str, typer.Option(help="Comma-separated outcome columns")],
    g: Annotated[str | None, typer.Option("--g", help="identity:y, indicator:y<c or product:y1*y2")] = None,
    g_den: Annotated[
        str | None, typer.Option("--g-den", help="Denominator g for a conditional mean mu_g / mu_g_den")
    ] = None,
    binary: Annotated[str | None, typer.Option(help="Comma-separated outcome columns holding 0/1")] = None,
    design: Annotated[str, typer.Option(help="Sample A design: srswor or stratified")] = "srswor",
    population_size: Annotated[
        int | None, typer.Option("--population-size", "-N", help="Population size N (srswor)", min=1)
    ] = None,
    strata: Annotated[
        Path | None, typer.Option(help="CSV with label, N, n per stratum (stratified design)")
    ] = None,
    k: Annotated[int, typer.Option(help="Donors per unit for KNN", min=1)] = 5,
    standardize: Annotated[bool, typer.Option(help="Standardize covariates before matching")] = False,
    ps_covariates: Annotated[str | None, typer.Option(help="Propensity covariates (IPW, DR)")] = None,
    om_covariates: Annotated[str | None, typer.Option(help="Outcome-regression covariates (DR)")] = None,
    n_basis: Annotated[int, typer.Option(help="Spline basis size per covariate (GAM)", min=2)] = 10,
) -> None:
    """Estimate a population mean from a probability sample and a big-data sample."""
    try:
        chosen = Method(method.upper())
        if design not in _DESIGNS:
            raise ValueError(f"unknown design {design!r}; choose from {', '.join(_DESIGNS)}")
        x_names, y_names = _names(covariates), _names(outcomes)
        b_schema = FrameSchema(covariates=x_names, outcomes=y_names, binary_outcomes=_names(binary))
        b_sample = read_big_sample_csv(b_file, b_schema)

        a_schema = FrameSchema(
            covariates=x_names,
            outcomes=y_names if chosen == Method.HT else [],
            binary_outcomes=_names(binary) if chosen == Method.HT else [],
            pi_column="pi",
            delta_b_column="delta_b" if chosen == Method.RC else None,
            stratum_column="stratum" if design == "stratified" else None,
        )
        if design == "stratified":
            if strata is None:
                raise ValueError("--strata is required for a stratified design")
            sample_design = read_strata_csv(strata)
            sample_a = read_sample_csv(a_file, a_schema, sample_design.population_size, sample_design)
        else:
            if population_size is None:
                raise ValueError("--population-size is required for an srswor design")
            sample_a = read_sample_csv(a_file, a_schema, population_size)

        g_num = parse_g(g, y_names) if g else parse_g(y_names[0], y_names)
        inputs = EstimationInputs(
            sample_a,
            b_sample,
            k=k,
            gam_config=GamConfig(n_basis=n_basis),
            ps_covariates=tuple(_names(ps_covariates)) or None,
            om_covariates=tuple(_names(om_covariates)) or None,
            standardize=standardize,
        )
        if g_den:
            report = estimate_conditional_mean(chosen, inputs, g_num, parse_g(g_den, y_names))
            target = f"{g_label(g_num, y_names)} / {g_label(parse_g(g_den, y_names), y_names)}"
        else:
            report = run_estimator(chosen, inputs, g_num)
            target = g_label(g_num, y_names)
    except (MassfuseError, FileNotFoundError, ValueError, RuntimeError) as e:
        emit_error(ctx, e)

    if is_json_mode(ctx):
        emit_success(ctx, {"target": target, "report": report.model_dump(mode="json")})
        return
    _print_report(report, target)


def _print_report(report: EstimateReport, target: str) -> None:
    table = Table(title=f"{report.method} estimate of {target}")
    table.add_column("Estimate", justify="right")
    table.add_column("S.E.", justify="right")
    table.add_column("95% CI", justify="right")
    table.add_row(
        f"{report.estimate:.6g}",
        f"{report.stderr:.6g}",
        f"[{report.ci95[0]:.6g}, {report.ci95[1]:.6g}]",
    )
    console.print(table)
    if report.meta.get("approximate"):
        console.print("[dim]Variance is an approximate plug-in.[/dim]")
