"""Sampling designs for Sample A and selection mechanisms for Sample B.

Closed-form first- and second-order inclusion probabilities live here too,
since every design-based variance in the package is a function of them.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import StrEnum
from functools import cached_property
from pathlib import Path
from typing import NamedTuple

import numpy as np
import pandas as pd
from scipy.optimize import bisect
from scipy.special import expit

from massfuse.errors import ConvergenceError, DesignError, EmptyFrameError, ModelError
from massfuse.frame import BigSample, Frame, ProbabilitySample

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SRSWOR:
    """Simple random sampling without replacement of n units from N."""

    N: int
    n: int

    def __post_init__(self) -> None:
        if not 0 < self.n <= self.N:
            raise DesignError(f"SRSWOR needs 0 < n <= N, got n={self.n}, N={self.N}")

    @property
    def population_size(self) -> int:
        return self.N

    @property
    def sample_size(self) -> int:
        return self.n


@dataclass(frozen=True)
class Stratum:
    label: int
    N: int
    n: int


@dataclass(frozen=True)
class StratifiedSRSWOR:
    """Independent SRSWOR within strata.

    Population units are laid out contiguously in the order of ``strata``:
    stratum 0 occupies positions [0, N_0), stratum 1 the next N_1, and so on.
    """

    strata: tuple[Stratum, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "strata", tuple(self.strata))
        if not self.strata:
            raise DesignError("a stratified design needs at least one stratum")
        labels = [s.label for s in self.strata]
        if len(set(labels)) != len(labels):
            raise DesignError(f"stratum labels must be unique: {labels}")
        for s in self.strata:
            if not 0 < s.n <= s.N:
                raise DesignError(f"stratum {s.label}: need 0 < n_h <= N_h, got n_h={s.n}, N_h={s.N}")

    @cached_property
    def _ends(self) -> np.ndarray:
        return np.cumsum([s.N for s in self.strata])

    @property
    def starts(self) -> np.ndarray:
        return self._ends - np.array([s.N for s in self.strata])

    @property
    def population_size(self) -> int:
        return int(self._ends[-1])

    @property
    def sample_size(self) -> int:
        return sum(s.n for s in self.strata)

    def positions(self, unit_index: np.ndarray) -> np.ndarray:
        """Stratum position (not label) of each population index."""
        return np.searchsorted(self._ends, np.asarray(unit_index), side="right")

    def labels(self) -> np.ndarray:
        """Stratum label of every population position."""
        return np.repeat([s.label for s in self.strata], [s.N for s in self.strata])


@dataclass(frozen=True, eq=False)
class ExplicitJoint:
    """A design given only through its first- and second-order inclusion probabilities."""

    pi: np.ndarray
    pi_joint: np.ndarray

    def __post_init__(self) -> None:
        pi = np.array(self.pi, dtype=float).reshape(-1)
        joint = np.array(self.pi_joint, dtype=float)
        if joint.shape != (pi.size, pi.size):
            raise DesignError(f"pi_joint must be {pi.size}x{pi.size}, got {joint.shape}")
        if not np.allclose(joint, joint.T, rtol=0.0, atol=1e-12):
            raise DesignError("pi_joint must be symmetric")
        if not np.allclose(np.diag(joint), pi, rtol=0.0, atol=1e-12):
            raise DesignError("the diagonal of pi_joint must equal pi")
        if not np.all((joint > 0) & (joint <= 1)):
            raise DesignError("joint inclusion probabilities must lie in (0, 1]")
        pi.setflags(write=False)
        joint.setflags(write=False)
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "pi_joint", joint)

    @property
    def population_size(self) -> int:
        return int(self.pi.size)

    @property
    def sample_size(self) -> int:
        return int(round(self.pi.sum()))


DesignDescriptor = SRSWOR | StratifiedSRSWOR | ExplicitJoint


def read_strata_csv(path: str | Path) -> StratifiedSRSWOR:
    """A stratified design from a CSV with columns label, N, n (extra columns are ignored)."""
    try:
        table = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise DesignError(f"Cannot read strata file {path}: {e}") from e
    missing = {"label", "N", "n"} - set(table.columns)
    if missing:
        raise DesignError(f"strata file {path} is missing column(s): {', '.join(sorted(missing))}")
    return StratifiedSRSWOR(
        tuple(Stratum(int(row.label), int(row.N), int(row.n)) for row in table.itertuples(index=False))
    )


def _check_index(design: DesignDescriptor, *indices: int) -> None:
    size = design.population_size
    for i in indices:
        if not 0 <= i < size:
            raise IndexError(f"unit index {i} out of range for a population of {size}")


def stratum_of(design: StratifiedSRSWOR, index: int) -> Stratum:
    _check_index(design, index)
    return design.strata[int(design.positions(np.array([index]))[0])]


def first_order_pi(design: DesignDescriptor, unit_index: int) -> float:
    _check_index(design, unit_index)
    match design:
        case SRSWOR(N=N, n=n):
            return n / N
        case StratifiedSRSWOR():
            s = stratum_of(design, unit_index)
            return s.n / s.N
        case ExplicitJoint():
            return float(design.pi[unit_index])
    raise TypeError(f"unknown design {design!r}")


def joint_pi(design: DesignDescriptor, i: int, j: int) -> float:
    """Joint inclusion probability of units i and j (pi_i when i == j)."""
    _check_index(design, i, j)
    if i == j:
        return first_order_pi(design, i)
    match design:
        case SRSWOR(N=N, n=n):
            return n * (n - 1) / (N * (N - 1))
        case StratifiedSRSWOR():
            si, sj = stratum_of(design, i), stratum_of(design, j)
            if si.label != sj.label:
                return (si.n / si.N) * (sj.n / sj.N)
            return si.n * (si.n - 1) / (si.N * (si.N - 1))
        case ExplicitJoint():
            return float(design.pi_joint[i, j])
    raise TypeError(f"unknown design {design!r}")


def first_order_vector(design: DesignDescriptor, unit_index: np.ndarray) -> np.ndarray:
    idx = np.asarray(unit_index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= design.population_size):
        raise IndexError(f"unit index out of range for a population of {design.population_size}")
    match design:
        case SRSWOR(N=N, n=n):
            return np.full(idx.shape, n / N)
        case StratifiedSRSWOR():
            rates = np.array([s.n / s.N for s in design.strata])
            return rates[design.positions(idx)]
        case ExplicitJoint():
            return design.pi[idx].copy()
    raise TypeError(f"unknown design {design!r}")


def joint_matrix(design: DesignDescriptor, unit_index: np.ndarray) -> np.ndarray:
    """The n x n matrix of pi_ij for the drawn units, pi_i on the diagonal."""
    idx = np.asarray(unit_index, dtype=np.int64)
    pi = first_order_vector(design, idx)
    match design:
        case SRSWOR(N=N, n=n):
            off = n * (n - 1) / (N * (N - 1)) if N > 1 else 0.0
            out = np.full((idx.size, idx.size), off)
        case StratifiedSRSWOR():
            pos = design.positions(idx)
            within = np.array([s.n * (s.n - 1) / (s.N * (s.N - 1)) if s.N > 1 else 0.0 for s in design.strata])
            same = pos[:, None] == pos[None, :]
            out = np.where(same, within[pos][:, None], np.outer(pi, pi))
        case ExplicitJoint():
            out = design.pi_joint[np.ix_(idx, idx)].copy()
        case _:
            raise TypeError(f"unknown design {design!r}")
    np.fill_diagonal(out, pi)
    return out


def infer_unit_index(design: DesignDescriptor, frame: Frame) -> np.ndarray:
    """Population positions for sample rows read from a file.

    SRSWOR ignores positions, so rows get 0..n-1. Stratified samples are laid
    out inside their stratum's block using the frame's stratum column.
    Explicit designs index their pi vector by unit id.
    """
    match design:
        case SRSWOR():
            return np.arange(frame.n_rows, dtype=np.int64)
        case StratifiedSRSWOR():
            if frame.strata is None:
                raise DesignError("a stratified sample needs a stratum column")
            by_label = {s.label: k for k, s in enumerate(design.strata)}
            starts = design.starts
            seen = np.zeros(len(design.strata), dtype=np.int64)
            out = np.empty(frame.n_rows, dtype=np.int64)
            for row, label in enumerate(frame.strata):
                k = by_label.get(int(label))
                if k is None:
                    raise DesignError(f"row {row + 1} has stratum {label} which the design does not declare")
                if seen[k] >= design.strata[k].N:
                    raise DesignError(f"stratum {label} has more sample rows than population units")
                out[row] = starts[k] + seen[k]
                seen[k] += 1
            return out
        case ExplicitJoint():
            return frame.ids.astype(np.int64)
    raise TypeError(f"unknown design {design!r}")


def _partial_fisher_yates(N: int, n: int, rng: np.random.Generator) -> np.ndarray:
    pool = np.arange(N, dtype=np.int64)
    for i in range(n):
        j = int(rng.integers(i, N))
        pool[i], pool[j] = pool[j], pool[i]
    return pool[:n].copy()


def draw_sample_a(pop: Frame, design: DesignDescriptor, rng: np.random.Generator) -> ProbabilitySample:
    """Draw Sample A from ``pop``; selected rows keep population order."""
    if design.population_size != pop.n_rows:
        raise DesignError(f"design covers {design.population_size} units but the population has {pop.n_rows}")
    match design:
        case SRSWOR(N=N, n=n):
            idx = _partial_fisher_yates(N, n, rng)
        case StratifiedSRSWOR():
            labels = design.labels()
            if pop.strata is not None and not np.array_equal(pop.strata, labels):
                raise DesignError("population strata are not laid out contiguously in design order")
            idx = np.concatenate(
                [start + _partial_fisher_yates(s.N, s.n, rng) for start, s in zip(design.starts, design.strata)]
            )
            if pop.strata is None:
                pop = pop.with_strata(labels)
        case ExplicitJoint():
            raise DesignError("an explicit joint-probability design carries no drawing rule")
        case _:
            raise TypeError(f"unknown design {design!r}")
    idx.sort()
    return ProbabilitySample(
        frame=pop.take(idx),
        pi=first_order_vector(design, idx),
        design=design,
        population_size=pop.n_rows,
        unit_index=idx,
    )


class SelectionForm(StrEnum):
    LINEAR = "linear"
    FACTORIAL_LINEAR = "factorial_linear"
    FACTORIAL_NONLINEAR = "factorial_nonlinear"
    MRTS_LINEAR = "mrts_linear"
    MRTS_NONLINEAR = "mrts_nonlinear"
    MRTS_NONLINEAR_STANDARDIZED = "mrts_nonlinear_standardized"


@dataclass(frozen=True)
class SelectionModel:
    """True Sample B inclusion mechanism: p_i = expit(intercept + offset(x_i)).

    The factorial and MRTS forms read covariates by position: (x1, x2) and
    (x, z) respectively. LINEAR uses one coefficient per covariate.
    MRTS_NONLINEAR_STANDARDIZED takes (mean_x, sd_x, mean_z, sd_z) as coefficients
    and applies the nonlinear form to the standardized covariates.
    """

    form: SelectionForm = SelectionForm.LINEAR
    intercept: float = 0.0
    coefficients: tuple[float, ...] = field(default=())

    @classmethod
    def logistic_linear(cls, coefficients: tuple[float, ...] | list[float], intercept: float = 0.0) -> SelectionModel:
        return cls(SelectionForm.LINEAR, intercept, tuple(float(c) for c in coefficients))

    def offset(self, frame: Frame) -> np.ndarray:
        x = frame.x
        match self.form:
            case SelectionForm.LINEAR:
                if len(self.coefficients) != frame.p:
                    raise ModelError(f"selection model has {len(self.coefficients)} coefficients for {frame.p} covariates")
                return x @ np.asarray(self.coefficients, dtype=float)
            case SelectionForm.FACTORIAL_LINEAR:
                return x[:, 1].copy()
            case SelectionForm.FACTORIAL_NONLINEAR:
                return -3.0 + (x[:, 0] - 1.5) ** 2 + (x[:, 1] - 2.0) ** 2
            case SelectionForm.MRTS_LINEAR:
                return x[:, 1].copy()
            case SelectionForm.MRTS_NONLINEAR:
                return x[:, 0] + x[:, 1] ** 2
            case SelectionForm.MRTS_NONLINEAR_STANDARDIZED:
                if len(self.coefficients) != 4:
                    raise ModelError("standardized selection needs (mean_x, sd_x, mean_z, sd_z)")
                mx, sx, mz, sz = self.coefficients
                return (x[:, 0] - mx) / sx + ((x[:, 1] - mz) / sz) ** 2
        raise ModelError(f"unknown selection form {self.form!r}")

    def probabilities(self, frame: Frame) -> np.ndarray:
        return expit(self.intercept + self.offset(frame))

    def with_intercept(self, intercept: float) -> SelectionModel:
        return SelectionModel(self.form, float(intercept), self.coefficients)


def draw_sample_b(pop: Frame, model: SelectionModel, rng: np.random.Generator) -> BigSample:
    """Independent Bernoulli(p_i) selection; flags are recorded on a copy of the population."""
    p = model.probabilities(pop)
    if not np.all(np.isfinite(p)) or np.any(p < 0.0) or np.any(p > 1.0):
        raise ModelError("selection model produced a probability outside [0, 1]")
    selected = rng.random(pop.n_rows) < p
    idx = np.flatnonzero(selected)
    if idx.size == 0:
        raise EmptyFrameError("Sample B draw selected no units")
    flagged = pop.with_delta_b(selected)
    return BigSample(frame=flagged.take(idx), population_index=idx, population=flagged)


def calibrate_intercept(pop: Frame, model: SelectionModel, target_mean_p: float) -> float:
    """Intercept a0 with mean_i expit(a0 + offset_i) equal to the target."""
    if not 0.0 < target_mean_p < 1.0:
        raise ModelError(f"target mean inclusion probability must be in (0, 1), got {target_mean_p}")
    offset = model.offset(pop)

    def gap(a0: float) -> float:
        return float(np.mean(expit(a0 + offset))) - target_mean_p

    lo = -float(offset.max()) - 40.0
    hi = -float(offset.min()) + 40.0
    if gap(lo) > 0 or gap(hi) < 0:
        raise ConvergenceError(f"target {target_mean_p} is not bracketed on [{lo:.3g}, {hi:.3g}]")
    try:
        a0 = bisect(gap, lo, hi, xtol=1e-12, maxiter=500)
    except RuntimeError as e:
        raise ConvergenceError(f"intercept bisection failed: {e}") from e
    miss = gap(a0)
    if abs(miss) > 1e-6:
        raise ConvergenceError(f"intercept bisection stopped {miss:.3g} away from the target", last_value=a0)
    log.debug("Calibrated selection intercept %.6f for mean p %.4f", a0, target_mean_p)
    return float(a0)


class ReplicateStreams(NamedTuple):
    population: np.random.Generator
    sample_b: np.random.Generator
    sample_a: np.random.Generator


def replicate_streams(master_seed: int, replicate: int) -> ReplicateStreams:
    """Independent PCG64 streams for one Monte Carlo replicate."""
    seq = np.random.SeedSequence(master_seed, spawn_key=(replicate,))
    return ReplicateStreams(*(np.random.Generator(np.random.PCG64(child)) for child in seq.spawn(3)))
