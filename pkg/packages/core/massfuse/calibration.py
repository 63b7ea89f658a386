"""Regression calibration of Sample A weights to Sample B benchmarks.

Calibrated weights minimise the chi-square distance sum_A d_i (w_i/d_i - 1)^2
subject to sum_A w_i h_i = N H, where H is the population mean of
h = (delta_B, 1 - delta_B, delta_B x, delta_B y) computed from Sample B.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from massfuse.errors import CollinearConstraintError, DesignError, RankError
from massfuse.frame import BigSample, GFunction, Identity, ProbabilitySample, g_values
from massfuse.matching import MatchResult, impute_values
from massfuse.report import EstimateReport, Method
from massfuse.variance import design_variance

log = logging.getLogger(__name__)

# (delta_b, x, y) -> (n, r)
HMap = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]

_RANK_TOL = 1e-10


def default_h(delta_b: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = np.asarray(delta_b, dtype=float).reshape(-1)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    return np.column_stack([d, 1.0 - d, d[:, None] * x, d * y])


def default_components(covariates: tuple[str, ...] | list[str], outcome: str) -> tuple[str, ...]:
    return ("delta_b", "1-delta_b", *(f"delta_b*{c}" for c in covariates), f"delta_b*{outcome}")


@dataclass(frozen=True, eq=False)
class CalibrationSpec:
    """Benchmark totals N*H and the map h(delta_b, x, y*) they are totals of.

    h must vanish off Sample B except for components that are constant in
    (x, y); the non-B part of every population sum is then (N - N_B) h(0, 0, 0).
    """

    target_totals: np.ndarray
    h_map: HMap = default_h
    components: tuple[str, ...] = ()
    outcome_index: int = 0

    def __post_init__(self) -> None:
        totals = np.array(self.target_totals, dtype=float).reshape(-1)
        if totals.size < 1:
            raise ValueError("a calibration needs at least one constraint")
        if not np.all(np.isfinite(totals)):
            raise ValueError("benchmark totals must be finite")
        names = tuple(self.components) or tuple(f"h{r}" for r in range(totals.size))
        if len(names) != totals.size:
            raise ValueError(f"{len(names)} component names for {totals.size} benchmark totals")
        totals.setflags(write=False)
        object.__setattr__(self, "target_totals", totals)
        object.__setattr__(self, "components", names)

    @classmethod
    def default(cls, b_sample: BigSample, population_size: int, outcome_index: int = 0) -> CalibrationSpec:
        frame = b_sample.frame
        return cls(
            target_totals=compute_benchmark(b_sample, population_size, outcome_index=outcome_index),
            components=default_components(frame.covariate_names, frame.outcome_names[outcome_index]),
            outcome_index=outcome_index,
        )

    def off_sample_h(self, p: int) -> np.ndarray:
        return self.h_map(np.zeros(1), np.zeros((1, p)), np.zeros(1))[0]


@dataclass(frozen=True, eq=False)
class CalibrationResult:
    omega: np.ndarray
    lagrange: np.ndarray
    achieved_totals: np.ndarray
    max_violation: float
    negative_weights: int
    vacuous: tuple[str, ...] = field(default=())

    def diagnostics(self) -> dict[str, object]:
        return {
            "max_violation": self.max_violation,
            "negative_weights": self.negative_weights,
            "vacuous_components": list(self.vacuous),
        }


def compute_benchmark(
    b_sample: BigSample,
    population_size: int,
    n_b: int | None = None,
    h_map: HMap = default_h,
    outcome_index: int = 0,
) -> np.ndarray:
    """N*H: Sample B sums of h plus (N - N_B) copies of h(0, 0, 0)."""
    frame = b_sample.frame
    n_b = frame.n_rows if n_b is None else n_b
    if n_b > population_size:
        raise DesignError(f"Sample B ({n_b}) is larger than the population ({population_size})")
    on_b = h_map(np.ones(frame.n_rows), frame.x, frame.y[:, outcome_index]).sum(axis=0)
    off_b = h_map(np.zeros(1), np.zeros((1, frame.p)), np.zeros(1))[0]
    return on_b + (population_size - n_b) * off_b


def _a_flags(sample_a: ProbabilitySample) -> np.ndarray:
    flags = sample_a.frame.delta_b
    if flags is None:
        raise ValueError("Sample B membership (delta_b) must be observed on every Sample A unit")
    return flags.astype(float)


def _solve_constraints(gram: np.ndarray, rhs: np.ndarray, names: list[str]) -> np.ndarray:
    scale = np.sqrt(np.diag(gram))
    normalised = gram / np.outer(scale, scale)
    _, r, piv = linalg.qr(normalised, pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > _RANK_TOL * diag[0]))
    if rank < len(names):
        raise CollinearConstraintError(names[piv[rank]])
    return linalg.solve(gram, rhs, assume_a="pos")


def calibrate_weights(
    sample_a: ProbabilitySample,
    spec: CalibrationSpec,
    imputed: np.ndarray,
    base_weights: np.ndarray | None = None,
) -> CalibrationResult:
    """Chi-square calibration w_i = d_i (1 + h_i' lambda) to the target totals.

    ``imputed`` is the y* column fed to h for every Sample A unit.
    """
    d = sample_a.weights if base_weights is None else np.asarray(base_weights, dtype=float)
    if np.any(d <= 0):
        raise ValueError("base weights must be positive")
    H = spec.h_map(_a_flags(sample_a), sample_a.frame.x, np.asarray(imputed, dtype=float))
    T = spec.target_totals
    if H.shape != (sample_a.n, T.size):
        raise ValueError(f"h map produced shape {H.shape}, expected ({sample_a.n}, {T.size})")

    names = list(spec.components)
    zero = np.all(H == 0.0, axis=0)
    for r in np.flatnonzero(zero):
        if T[r] != 0.0:
            raise CollinearConstraintError(
                names[r], f"Calibration constraint {names[r]!r} has a nonzero benchmark but no Sample A unit carries it"
            )
    active = np.flatnonzero(~zero)
    vacuous = tuple(names[r] for r in np.flatnonzero(zero))

    Ha = H[:, active]
    gram = (Ha.T * d) @ Ha
    lam_active = _solve_constraints(gram, T[active] - d @ Ha, [names[r] for r in active])
    omega = d * (1.0 + Ha @ lam_active)

    lagrange = np.zeros(T.size)
    lagrange[active] = lam_active
    achieved = omega @ H
    N = sample_a.population_size
    violation = float(np.max(np.abs(achieved / N - T / N) / (1.0 + np.abs(T / N))))
    negative = int(np.sum(omega < 0))
    if negative:
        log.info("Calibration produced %d negative weight(s)", negative)
    return CalibrationResult(omega, lagrange, achieved, violation, negative, vacuous)


def beta_hat(
    sample_a: ProbabilitySample,
    match: MatchResult,
    b_sample: BigSample,
    g: GFunction,
    spec: CalibrationSpec | None = None,
) -> np.ndarray:
    """Population regression of g on h, assembled from Sample B sums and a Sample A sum for the non-B part."""
    spec = spec or CalibrationSpec.default(b_sample, sample_a.population_size)
    frame = b_sample.frame
    N = sample_a.population_size
    Hb = spec.h_map(np.ones(frame.n_rows), frame.x, frame.y[:, spec.outcome_index])
    h0 = spec.off_sample_h(frame.p)
    gb = g_values(g, frame.y)
    g_star = impute_values(match.first(), b_sample, g)
    off_b = sample_a.weights * (1.0 - _a_flags(sample_a))

    gram = Hb.T @ Hb + (N - frame.n_rows) * np.outer(h0, h0)
    v = Hb.T @ gb + float(off_b @ g_star) * h0

    beta = np.zeros(gram.shape[0])
    active = np.flatnonzero(np.diag(gram) > 0)
    sub = gram[np.ix_(active, active)]
    scale = np.sqrt(np.diag(sub))
    if np.linalg.cond(sub / np.outer(scale, scale)) > 1.0 / _RANK_TOL:
        raise RankError("the population Gram matrix of h is singular")
    beta[active] = linalg.solve(sub, v[active], assume_a="pos")
    return beta


@dataclass(frozen=True, eq=False)
class RcFit:
    estimate: float
    g_star: np.ndarray
    residuals: np.ndarray
    beta: np.ndarray
    calibration: CalibrationResult


def rc_fit(
    sample_a: ProbabilitySample,
    match: MatchResult,
    b_sample: BigSample,
    g: GFunction,
    spec: CalibrationSpec | None = None,
) -> RcFit:
    spec = spec or CalibrationSpec.default(b_sample, sample_a.population_size)
    first = match.first()
    y_star = impute_values(first, b_sample, Identity(spec.outcome_index))
    result = calibrate_weights(sample_a, spec, y_star)
    g_star = impute_values(first, b_sample, g)
    beta = beta_hat(sample_a, first, b_sample, g, spec)
    H = spec.h_map(_a_flags(sample_a), sample_a.frame.x, y_star)
    estimate = float(result.omega @ g_star) / sample_a.population_size
    return RcFit(estimate, g_star, g_star - H @ beta, beta, result)


def estimate_rc(
    sample_a: ProbabilitySample,
    match: MatchResult,
    b_sample: BigSample,
    g: GFunction,
    spec: CalibrationSpec | None = None,
) -> EstimateReport:
    """N^-1 sum_A w_i g(y_i(1)) with the variance of the residuals g* - h'beta."""
    fit = rc_fit(sample_a, match, b_sample, g, spec)
    variance = design_variance(fit.residuals, sample_a, "ht")
    return EstimateReport.build(
        Method.RC,
        fit.estimate,
        variance,
        variance_form="ht",
        beta=fit.beta.tolist(),
        **fit.calibration.diagnostics(),
    )
