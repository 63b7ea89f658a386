"""Synthetic populations for the two simulation studies.

Factorial: N units with X1 ~ N(1, 1), X2 ~ Exp(1), a shared random effect
alpha ~ N(0, 1) linking a continuous Y1 and a binary Y2. Scenarios I-IV
cross a linear or nonlinear outcome model with a linear or nonlinear
Sample B selection model.

MRTS: 16 strata of retail businesses with inventories X and size Z drawn
from the stratum's N(mu_h, sigma_h^2), sales Y linear or quadratic in
(X, Z), and the intercept solved so the population mean of Y is 12.73.
"""

from __future__ import annotations

import math
from enum import StrEnum
from functools import cache
from pathlib import Path
from typing import Literal

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit

from massfuse.designs import SRSWOR, SelectionForm, SelectionModel, StratifiedSRSWOR, Stratum, calibrate_intercept
from massfuse.frame import Frame
from massfuse.gam import GamConfig

_DATA_DIR = Path(__file__).parent / "data"

MRTS_NOISE_VARIANCE = 0.52
MRTS_TARGET_MEAN = 12.73
MRTS_MEAN_INCLUSION = 0.30
MRTS_DEFAULT_SCALE = 1 / 8


class Experiment(StrEnum):
    FACTORIAL = "factorial"
    MRTS = "mrts"


class ModelShape(StrEnum):
    LINEAR = "linear"
    NONLINEAR = "nonlinear"


ScenarioName = Literal["I", "II", "III", "IV"]

# scenario -> (outcome model, selection model)
SCENARIOS: dict[str, tuple[ModelShape, ModelShape]] = {
    "I": (ModelShape.LINEAR, ModelShape.LINEAR),
    "II": (ModelShape.LINEAR, ModelShape.NONLINEAR),
    "III": (ModelShape.NONLINEAR, ModelShape.LINEAR),
    "IV": (ModelShape.NONLINEAR, ModelShape.NONLINEAR),
}


class RunSettings(BaseModel):
    """Settings shared by a single scenario run and a whole simulation."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    experiment: Experiment = Experiment.FACTORIAL
    N: int = Field(100_000, ge=2)
    n: int = Field(1000, ge=2)
    replicates: int = Field(500, ge=1)
    master_seed: int = Field(20200101, ge=0, lt=2**64)
    k: int = Field(5, ge=1)
    scale: float | None = Field(None, gt=0)
    mean_inclusion: float = Field(MRTS_MEAN_INCLUSION, gt=0, lt=1)
    target_mean: float = MRTS_TARGET_MEAN
    # "standardized" applies the nonlinear MRTS selection to population-standardized (x, z)
    mrts_selection: Literal["displayed", "standardized"] = "displayed"
    gam: GamConfig = Field(default_factory=GamConfig)

    @property
    def effective_scale(self) -> float:
        if self.scale is not None:
            return self.scale
        return MRTS_DEFAULT_SCALE if self.experiment == Experiment.MRTS else 1.0


class ScenarioConfig(RunSettings):
    scenario: ScenarioName = "I"

    @model_validator(mode="after")
    def _check_sizes(self) -> ScenarioConfig:
        if self.experiment == Experiment.FACTORIAL and self.n > self.population_size:
            raise ValueError(f"sample size n={self.n} exceeds the population ({self.population_size})")
        return self

    @property
    def outcome_model(self) -> ModelShape:
        return SCENARIOS[self.scenario][0]

    @property
    def selection_shape(self) -> ModelShape:
        return SCENARIOS[self.scenario][1]

    @property
    def population_size(self) -> int:
        if self.experiment == Experiment.MRTS:
            return mrts_strata().scaled(self.effective_scale).population_size
        return math.ceil(self.N * self.effective_scale)

    def effective_settings(self) -> dict[str, object]:
        """Every setting with defaults resolved, for report headers."""
        out = self.model_dump(mode="json")
        out["scale"] = self.effective_scale
        out["population_size"] = self.population_size
        out["outcome_model"] = self.outcome_model.value
        out["selection_model"] = self.selection_shape.value
        return out


# --- MRTS strata -----------------------------------------------------------------


class MrtsStratum(BaseModel):
    model_config = ConfigDict(frozen=True)

    label: int
    N: int = Field(ge=1)
    n: int = Field(ge=1)
    mu: float
    sigma: float = Field(gt=0)


class MrtsStratumSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    strata: tuple[MrtsStratum, ...]

    @classmethod
    def from_csv(cls, path: str | Path) -> MrtsStratumSpec:
        table = pd.read_csv(path)
        return cls(strata=tuple(MrtsStratum(**row) for row in table.to_dict(orient="records")))

    @property
    def population_size(self) -> int:
        return sum(s.N for s in self.strata)

    def scaled(self, scale: float) -> MrtsStratumSpec:
        """Shrink every N_h by ``scale``, keeping at least n_h units."""
        if scale == 1.0:
            return self
        return MrtsStratumSpec(
            strata=tuple(s.model_copy(update={"N": max(s.n, math.ceil(s.N * scale))}) for s in self.strata)
        )

    def design(self) -> StratifiedSRSWOR:
        return StratifiedSRSWOR(tuple(Stratum(s.label, s.N, s.n) for s in self.strata))


@cache
def mrts_strata() -> MrtsStratumSpec:
    """The 16-stratum allocation shipped with the package."""
    return MrtsStratumSpec.from_csv(_DATA_DIR / "mrts_strata.csv")


# --- generators ------------------------------------------------------------------


def factorial_outcomes(
    x1: np.ndarray,
    x2: np.ndarray,
    alpha: np.ndarray,
    eps: np.ndarray,
    u: np.ndarray,
    outcome_model: ModelShape,
) -> tuple[np.ndarray, np.ndarray]:
    """(Y1, Y2) with Y2 = 1 when u < expit(m + alpha)."""
    if outcome_model == ModelShape.LINEAR:
        m = 1.0 + x1 + x2
    else:
        m = 0.5 * (x1 - 1.5) ** 2 + x2**2
    y1 = m + alpha + eps
    y2 = (u < expit(m + alpha)).astype(float)
    return y1, y2


def generate_factorial_population(config: ScenarioConfig, rng: np.random.Generator) -> Frame:
    N = config.population_size
    x1 = rng.normal(1.0, 1.0, N)
    x2 = rng.exponential(1.0, N)
    alpha = rng.normal(0.0, 1.0, N)
    eps = rng.normal(0.0, 1.0, N)
    u = rng.random(N)
    y1, y2 = factorial_outcomes(x1, x2, alpha, eps, u, config.outcome_model)
    return Frame(
        ids=np.arange(N),
        x=np.column_stack([x1, x2]),
        y=np.column_stack([y1, y2]),
        covariate_names=("x1", "x2"),
        outcome_names=("y1", "y2"),
        binary_outcomes=frozenset({"y2"}),
    )


def solve_beta0(pre_intercept: np.ndarray, target_mean: float) -> float:
    """The additive intercept that moves the population mean to target_mean."""
    return float(target_mean - np.mean(pre_intercept))


def generate_mrts_population(
    spec: MrtsStratumSpec,
    outcome_model: ModelShape,
    rng: np.random.Generator,
    target_mean: float = MRTS_TARGET_MEAN,
) -> Frame:
    """Strata laid out contiguously in table order; Z uses the same per-stratum law as X."""
    x = np.concatenate([rng.normal(s.mu, s.sigma, s.N) for s in spec.strata])
    z = np.concatenate([rng.normal(s.mu, s.sigma, s.N) for s in spec.strata])
    eps = rng.normal(0.0, math.sqrt(MRTS_NOISE_VARIANCE), x.size)
    base = (x + z if outcome_model == ModelShape.LINEAR else x**2 + z**2) + eps
    y = base + solve_beta0(base, target_mean)
    return Frame(
        ids=np.arange(x.size),
        x=np.column_stack([x, z]),
        y=y.reshape(-1, 1),
        covariate_names=("x", "z"),
        outcome_names=("y",),
        strata=np.repeat([s.label for s in spec.strata], [s.N for s in spec.strata]),
    )


def generate_population(config: ScenarioConfig, rng: np.random.Generator) -> Frame:
    if config.experiment == Experiment.MRTS:
        spec = mrts_strata().scaled(config.effective_scale)
        return generate_mrts_population(spec, config.outcome_model, rng, config.target_mean)
    return generate_factorial_population(config, rng)


# --- per-scenario wiring ------------------------------------------------------------


def selection_model_for(config: ScenarioConfig, population: Frame) -> SelectionModel:
    """The true Sample B mechanism; MRTS intercepts are calibrated on the population."""
    linear = config.selection_shape == ModelShape.LINEAR
    if config.experiment == Experiment.FACTORIAL:
        return SelectionModel(SelectionForm.FACTORIAL_LINEAR if linear else SelectionForm.FACTORIAL_NONLINEAR)
    if linear:
        model = SelectionModel(SelectionForm.MRTS_LINEAR)
    elif config.mrts_selection == "standardized":
        x, z = population.x[:, 0], population.x[:, 1]
        moments = (x.mean(), x.std(), z.mean(), z.std())
        model = SelectionModel(SelectionForm.MRTS_NONLINEAR_STANDARDIZED, coefficients=tuple(map(float, moments)))
    else:
        model = SelectionModel(SelectionForm.MRTS_NONLINEAR)
    return model.with_intercept(calibrate_intercept(population, model, config.mean_inclusion))


def sample_a_design(config: ScenarioConfig) -> SRSWOR | StratifiedSRSWOR:
    if config.experiment == Experiment.MRTS:
        return mrts_strata().scaled(config.effective_scale).design()
    return SRSWOR(N=config.population_size, n=config.n)


def working_covariates(config: ScenarioConfig) -> tuple[tuple[str, ...], tuple[str, ...]]:
    """(propensity covariates, outcome-regression covariates); an intercept is always added."""
    if config.experiment == Experiment.MRTS:
        return ("z",), ("x", "z")
    return ("x2",), ("x1", "x2")
