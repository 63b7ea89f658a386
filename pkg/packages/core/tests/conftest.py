"""Shared fixtures for core tests."""

from __future__ import annotations

import numpy as np
import pytest
from massfuse.designs import SRSWOR, SelectionForm, SelectionModel, draw_sample_a, draw_sample_b
from massfuse.frame import BigSample, Frame, ProbabilitySample
from massfuse.scenarios import ScenarioConfig, generate_factorial_population


def _make_frame(x, y=None, *, covariates=None, outcomes=None, **kwargs) -> Frame:
    """Frame with ids 0..n-1 and default names x1.., y1..; 1-D x is one covariate column."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    y = np.empty((x.shape[0], 0)) if y is None else np.asarray(y, dtype=float).reshape(x.shape[0], -1)
    return Frame(
        ids=np.arange(x.shape[0]),
        x=x,
        y=y,
        covariate_names=tuple(covariates or (f"x{j + 1}" for j in range(x.shape[1]))),
        outcome_names=tuple(outcomes or (f"y{j + 1}" for j in range(y.shape[1]))),
        **kwargs,
    )


def _srs_sample(frame: Frame, population_size: int) -> ProbabilitySample:
    """Treat ``frame`` as an SRSWOR sample of size n from N units."""
    n = frame.n_rows
    return ProbabilitySample(
        frame=frame,
        pi=np.full(n, n / population_size),
        design=SRSWOR(N=population_size, n=n),
        population_size=population_size,
        unit_index=np.arange(n),
    )


@pytest.fixture
def make_frame():
    return _make_frame


@pytest.fixture
def srs_sample():
    return _srs_sample


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20200101)


@pytest.fixture
def factorial_config() -> ScenarioConfig:
    return ScenarioConfig(N=3000, n=200, replicates=4, master_seed=7)


@pytest.fixture
def population(factorial_config: ScenarioConfig) -> Frame:
    return generate_factorial_population(factorial_config, np.random.default_rng(11))


@pytest.fixture
def samples(population: Frame) -> tuple[ProbabilitySample, BigSample]:
    """(Sample A, Sample B) from the linear-selection factorial population."""
    b = draw_sample_b(population, SelectionModel(SelectionForm.FACTORIAL_LINEAR), np.random.default_rng(12))
    a = draw_sample_a(b.population, SRSWOR(N=population.n_rows, n=200), np.random.default_rng(13))
    return a, b
