"""Monte Carlo harness: replicate loop, aggregation and report files.

Each replicate draws its own population, Sample B and Sample A from streams
keyed by (master_seed, replicate), runs every estimator on every target and
records the estimate, its standard error and whether the 95% interval covers
that replicate's finite-population value. Aggregation happens after all
replicates return, in replicate order, with exact float summation, so the
report does not depend on the worker count.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd
import yaml
from pydantic import BaseModel, Field, ValidationError, field_validator

from massfuse.designs import draw_sample_a, draw_sample_b, replicate_streams
from massfuse.errors import ConfigError, MassfuseError, RatioUndefinedError
from massfuse.estimators import METHODS, EstimationInputs, estimate, estimate_conditional_mean
from massfuse.frame import Frame, GFunction, Identity, Product, g_values
from massfuse.report import Z_975, EstimateReport, Method
from massfuse.scenarios import (
    Experiment,
    RunSettings,
    ScenarioConfig,
    ScenarioName,
    generate_population,
    sample_a_design,
    selection_model_for,
    working_covariates,
)

log = logging.getLogger(__name__)

REPORT_COLUMNS = [
    "scenario",
    "target",
    "estimator",
    "bias",
    "mc_se",
    "coverage",
    "mean_est_se",
    "errors",
    "replicates",
]

# plug-in variances for these are approximate; coverage uses the Monte Carlo SE
_MC_SE_COVERAGE = frozenset({Method.IPW, Method.DR})


class SimulationConfig(RunSettings):
    """A simulation run: shared settings, the scenarios to run, and execution options."""

    scenarios: list[ScenarioName] = Field(default_factory=lambda: ["I"], min_length=1)
    workers: int = Field(1, ge=1)
    max_error_rate: float = Field(0.05, ge=0, le=1)

    @field_validator("scenarios")
    @classmethod
    def _unique(cls, v: list[str]) -> list[str]:
        if len(set(v)) != len(v):
            raise ValueError(f"scenarios must be unique: {v}")
        return v

    def scenario_configs(self) -> list[ScenarioConfig]:
        shared = self.model_dump(exclude={"scenarios", "workers", "max_error_rate"})
        return [ScenarioConfig(**shared, scenario=s) for s in self.scenarios]


def load_config(path: str | Path) -> SimulationConfig:
    """Read a JSON or YAML simulation config; any problem raises ConfigError."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigError(f"Config {path} must be a mapping, got {type(raw).__name__}")
    try:
        return SimulationConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}: {e}") from e


# --- targets ---------------------------------------------------------------------


@dataclass(frozen=True)
class Target:
    """A population mean of g, or a ratio of two such means."""

    name: str
    g: GFunction
    g_den: GFunction | None = None

    def truth(self, population: Frame) -> float:
        num = math.fsum(g_values(self.g, population.y))
        if self.g_den is None:
            return num / population.n_rows
        den = math.fsum(g_values(self.g_den, population.y))
        if den == 0.0:
            raise RatioUndefinedError(f"population total of the {self.name} denominator is zero")
        return num / den

    def estimate(self, method: Method, inputs: EstimationInputs) -> EstimateReport:
        if self.g_den is None:
            return estimate(method, inputs, self.g)
        return estimate_conditional_mean(method, inputs, self.g, self.g_den)


def targets_for(experiment: Experiment) -> tuple[Target, ...]:
    if experiment == Experiment.MRTS:
        return (Target("mean_y", Identity(0)),)
    return (
        Target("mean_y1", Identity(0)),
        Target("mean_y2", Identity(1)),
        Target("cond_y1_given_y2", Product(0, 1), Identity(1)),
    )


# --- replicates ------------------------------------------------------------------


@dataclass(frozen=True)
class CellOutcome:
    target: str
    method: Method
    truth: float
    estimate: float = math.nan
    stderr: float = math.nan
    covered: bool = False
    error: str | None = None


_FAILURES = (MassfuseError, np.linalg.LinAlgError, FloatingPointError, ValueError)


def run_replicate(config: ScenarioConfig, replicate: int) -> list[CellOutcome]:
    """All targets x estimators for one replicate. Estimator failures are recorded, not raised."""
    streams = replicate_streams(config.master_seed, replicate)
    population = generate_population(config, streams.population)
    targets = targets_for(config.experiment)
    truths: dict[str, float] = {}
    undefined: dict[str, str] = {}
    for target in targets:
        try:
            truths[target.name] = target.truth(population)
        except _FAILURES as e:
            log.warning("Replicate %d: true %s is undefined: %s", replicate, target.name, e)
            truths[target.name] = math.nan
            undefined[target.name] = type(e).__name__
    try:
        b = draw_sample_b(population, selection_model_for(config, population), streams.sample_b)
        a = draw_sample_a(b.population, sample_a_design(config), streams.sample_a)
    except _FAILURES as e:
        log.warning("Replicate %d of scenario %s failed to draw samples: %s", replicate, config.scenario, e)
        return [CellOutcome(t.name, m, truths[t.name], error=type(e).__name__) for t in targets for m in METHODS]

    ps, om = working_covariates(config)
    inputs = EstimationInputs(a, b, k=config.k, gam_config=config.gam, ps_covariates=ps, om_covariates=om)
    outcomes: list[CellOutcome] = []
    for target in targets:
        truth = truths[target.name]
        for method in METHODS:
            if target.name in undefined:
                outcomes.append(CellOutcome(target.name, method, truth, error=undefined[target.name]))
                continue
            try:
                report = target.estimate(method, inputs)
            except _FAILURES as e:
                log.warning("Replicate %d: %s for %s failed: %s", replicate, method, target.name, e)
                outcomes.append(CellOutcome(target.name, method, truth, error=type(e).__name__))
                continue
            outcomes.append(
                CellOutcome(target.name, method, truth, report.estimate, report.stderr, report.covers(truth))
            )
    return outcomes


def _replicate_task(job: tuple[ScenarioConfig, int]) -> list[CellOutcome]:
    config, replicate = job
    return run_replicate(config, replicate)


def _run_replicates(config: ScenarioConfig, workers: int) -> list[list[CellOutcome]]:
    jobs = [(config, r) for r in range(config.replicates)]
    if workers <= 1:
        return [_replicate_task(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_replicate_task, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


# --- aggregation -----------------------------------------------------------------


class CellSummary(BaseModel):
    scenario: str
    target: str
    estimator: Method
    bias: float
    mc_se: float
    coverage: float
    mean_est_se: float
    errors: int
    replicates: int


class RunReport(BaseModel):
    experiment: Experiment
    cells: list[CellSummary] = Field(default_factory=list)
    settings: list[dict[str, Any]] = Field(default_factory=list)
    wall_time: float = 0.0

    @property
    def error_rate(self) -> float:
        total = sum(c.replicates for c in self.cells)
        return sum(c.errors for c in self.cells) / total if total else 0.0

    def to_frame(self) -> pd.DataFrame:
        rows = [c.model_dump(mode="json") for c in self.cells]
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)


def summarise(scenario: str, target: str, method: Method, outcomes: list[CellOutcome]) -> CellSummary:
    ok = [o for o in outcomes if o.error is None]
    m = len(ok)
    if m == 0:
        nan = math.nan
        return CellSummary(
            scenario=scenario, target=target, estimator=method, bias=nan, mc_se=nan, coverage=nan,
            mean_est_se=nan, errors=len(outcomes), replicates=len(outcomes),
        )
    mean_est = math.fsum(o.estimate for o in ok) / m
    bias = math.fsum(o.estimate - o.truth for o in ok) / m
    mc_se = math.sqrt(math.fsum((o.estimate - mean_est) ** 2 for o in ok) / (m - 1)) if m > 1 else 0.0
    if method in _MC_SE_COVERAGE:
        hits = sum(abs(o.estimate - o.truth) <= Z_975 * mc_se for o in ok)
    else:
        hits = sum(o.covered for o in ok)
    return CellSummary(
        scenario=scenario,
        target=target,
        estimator=method,
        bias=bias,
        mc_se=mc_se,
        coverage=hits / m,
        mean_est_se=math.fsum(o.stderr for o in ok) / m,
        errors=len(outcomes) - m,
        replicates=len(outcomes),
    )


def _aggregate(config: ScenarioConfig, replicates: list[list[CellOutcome]]) -> list[CellSummary]:
    cells = []
    for target in targets_for(config.experiment):
        for method in METHODS:
            outcomes = [o for rep in replicates for o in rep if o.target == target.name and o.method == method]
            cells.append(summarise(config.scenario, target.name, method, outcomes))
    return cells


def _run(configs: list[ScenarioConfig], workers: int) -> RunReport:
    experiments = {c.experiment for c in configs}
    if len(experiments) != 1:
        raise ConfigError("all scenarios of a run must belong to one experiment")
    start = time.perf_counter()
    cells: list[CellSummary] = []
    for config in configs:
        log.info(
            "Running %s scenario %s: %d replicates on %d worker(s)",
            config.experiment, config.scenario, config.replicates, workers,
        )
        cells.extend(_aggregate(config, _run_replicates(config, workers)))
    wall = time.perf_counter() - start
    log.info("Simulation finished in %.1fs", wall)
    return RunReport(
        experiment=experiments.pop(),
        cells=cells,
        settings=[c.effective_settings() for c in configs],
        wall_time=wall,
    )


def run_factorial(config: ScenarioConfig | list[ScenarioConfig], workers: int = 1) -> RunReport:
    configs = config if isinstance(config, list) else [config]
    if any(c.experiment != Experiment.FACTORIAL for c in configs):
        raise ConfigError("run_factorial needs factorial scenarios")
    return _run(configs, workers)


def run_mrts(config: ScenarioConfig | list[ScenarioConfig], workers: int = 1) -> RunReport:
    configs = config if isinstance(config, list) else [config]
    if any(c.experiment != Experiment.MRTS for c in configs):
        raise ConfigError("run_mrts needs MRTS scenarios")
    return _run(configs, workers)


def run_simulation(config: SimulationConfig) -> RunReport:
    runner = run_mrts if config.experiment == Experiment.MRTS else run_factorial
    return runner(config.scenario_configs(), workers=config.workers)


# --- report files ----------------------------------------------------------------


def _table_text(report: RunReport) -> str:
    """Bias, S.E. and C.R. (all x100) per target and estimator, one column group per scenario."""
    frame = report.to_frame()
    if frame.empty:
        return "(no results)\n"
    blocks = []
    for scenario in frame["scenario"].unique():
        block = frame[frame["scenario"] == scenario].set_index(["target", "estimator"])
        block = block[["bias", "mc_se", "coverage"]] * 100
        block.columns = pd.MultiIndex.from_product([[scenario], ["Bias", "S.E.", "C.R."]])
        blocks.append(block)
    return pd.concat(blocks, axis=1).to_string(float_format=lambda v: f"{v:.1f}") + "\n"


def write_report(report: RunReport, out_dir: str | Path) -> list[Path]:
    """Write report.csv, report.txt and config.json into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    csv_path = out / "report.csv"
    report.to_frame().to_csv(csv_path, index=False, lineterminator="\n", float_format="%.10g", na_rep="nan")

    header = [f"# experiment: {report.experiment}"]
    for settings in report.settings:
        header.append("# " + json.dumps(settings, sort_keys=True))
    header.append(f"# wall_time_seconds: {report.wall_time:.1f}")
    txt_path = out / "report.txt"
    txt_path.write_text("\n".join(header) + "\n\n" + _table_text(report), encoding="utf-8")

    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(report.settings, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("Wrote report to %s", out)
    return [csv_path, txt_path, cfg_path]
