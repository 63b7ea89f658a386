"""Point and variance estimators for a finite-population mean mu_g = N^-1 sum g(Y_i).

HT uses Sample A outcomes directly (benchmark mode). NNI, KNN, GAM and RC
mass-impute g(Y) into Sample A from Sample B. IPW and DR weight Sample B by
an estimated propensity and are reported with approximate plug-in variances.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any

import numpy as np
from scipy import linalg
from scipy.special import expit

from massfuse.calibration import CalibrationSpec, rc_fit
from massfuse.errors import ConvergenceError, EmptyFrameError, ExtremeWeightError, RatioUndefinedError, SchemaError
from massfuse.frame import BigSample, Frame, GFunction, Identity, ProbabilitySample, Product, g_values
from massfuse.gam import GamConfig, fit_gam
from massfuse.matching import MatchResult, impute_values, match_knn
from massfuse.report import EstimateReport, Method
from massfuse.variance import VarianceForm, design_variance

log = logging.getLogger(__name__)

METHODS: tuple[Method, ...] = (Method.HT, Method.IPW, Method.DR, Method.NNI, Method.KNN, Method.GAM, Method.RC)

_MIN_PROPENSITY = 1e-6


# --- working models --------------------------------------------------------------


def _features(frame: Frame, covariates: tuple[str, ...]) -> np.ndarray:
    cols = [frame.covariate_index(c) for c in covariates]
    return np.column_stack([np.ones(frame.n_rows), frame.x[:, cols]])


@dataclass(frozen=True, eq=False)
class PropensityModel:
    """logit p(x) = eta_0 + sum_j eta_j x_j over the named covariates."""

    covariates: tuple[str, ...]
    coefficients: np.ndarray
    iterations: int = 0
    gradient_norm: float = 0.0

    def probabilities(self, frame: Frame) -> np.ndarray:
        return expit(_features(frame, self.covariates) @ self.coefficients)


def fit_propensity(
    sample_a: ProbabilitySample,
    b_sample: BigSample,
    covariates: tuple[str, ...] | list[str] | None = None,
    *,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> PropensityModel:
    """Newton solve of the design-weighted pseudo-likelihood score.

    score(eta) = sum_B x_i - sum_A d_i p_i(eta) x_i
    """
    covariates = tuple(covariates) if covariates is not None else b_sample.frame.covariate_names
    Fa = _features(sample_a.frame, covariates)
    Fb = _features(b_sample.frame, covariates)
    d = sample_a.weights
    target = Fb.sum(axis=0)
    tol_abs = tol * (1.0 + float(np.linalg.norm(target)))

    def loglik(eta: np.ndarray) -> float:
        return float(target @ eta - d @ np.logaddexp(0.0, Fa @ eta))

    eta = np.zeros(Fa.shape[1])
    share = b_sample.n / float(d.sum())
    eta[0] = np.log(share / (1.0 - share)) if 0.0 < share < 1.0 else 0.0
    grad_norm = np.inf
    for it in range(1, max_iter + 1):
        p = expit(Fa @ eta)
        grad = target - Fa.T @ (d * p)
        grad_norm = float(np.linalg.norm(grad))
        if grad_norm < tol_abs:
            return PropensityModel(covariates, eta, it - 1, grad_norm)
        info = (Fa.T * (d * p * (1.0 - p))) @ Fa
        try:
            step = linalg.solve(info, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError) as e:
            raise ConvergenceError("propensity information matrix is singular; the samples are separated",
                                   last_value=grad_norm) from e
        base = loglik(eta)
        t = 1.0
        while loglik(eta + t * step) < base and t > 1e-10:
            t /= 2.0
        eta = eta + t * step
        if not np.all(np.isfinite(eta)) or np.max(np.abs(eta)) > 1e3:
            raise ConvergenceError("propensity coefficients diverge; the samples are separated", last_value=grad_norm)
    raise ConvergenceError(f"propensity fit did not converge within {max_iter} iterations", last_value=grad_norm)


def fit_outcome_regression(b_sample: BigSample, values: np.ndarray, covariates: tuple[str, ...]) -> np.ndarray:
    """Least squares of g on (1, x) over Sample B."""
    Fb = _features(b_sample.frame, covariates)
    beta, *_ = linalg.lstsq(Fb, values)
    return beta


# --- inputs and per-method fits ------------------------------------------------------


@dataclass(frozen=True, eq=False)
class EstimationInputs:
    """Everything an estimator may need. Matches and propensity fits are computed once and reused."""

    sample_a: ProbabilitySample
    b_sample: BigSample
    k: int = 5
    match: MatchResult | None = None
    gam_config: GamConfig = field(default_factory=GamConfig)
    propensity: PropensityModel | None = None
    ps_covariates: tuple[str, ...] | None = None
    om_covariates: tuple[str, ...] | None = None
    calibration: CalibrationSpec | None = None
    standardize: bool = False

    @cached_property
    def _match(self) -> MatchResult:
        if self.match is not None:
            return self.match
        return match_knn(self.sample_a.frame.x, self.b_sample.frame.x, max(self.k, 1), standardize=self.standardize)

    def donors(self, k: int) -> MatchResult:
        base = self._match
        if base.k >= k:
            return base.head(k)
        return match_knn(self.sample_a.frame.x, self.b_sample.frame.x, k, standardize=self.standardize)

    @cached_property
    def fitted_propensity(self) -> PropensityModel:
        if self.propensity is not None:
            return self.propensity
        return fit_propensity(self.sample_a, self.b_sample, self.ps_covariates)

    @property
    def outcome_covariates(self) -> tuple[str, ...]:
        return self.om_covariates or self.b_sample.frame.covariate_names

    @property
    def population_size(self) -> int:
        return self.sample_a.population_size


@dataclass(frozen=True, eq=False)
class _Fit:
    """A point estimate plus the per-unit values its variance is built from."""

    estimate: float
    a_values: np.ndarray | None = None  # HT-linearised contribution per Sample A unit
    b_values: np.ndarray | None = None  # g-residuals per Sample B unit (IPW/DR)
    propensity: np.ndarray | None = None
    form: VarianceForm = "ht"
    meta: dict[str, Any] = field(default_factory=dict)


def _ht_mean(values: np.ndarray, sample: ProbabilitySample) -> float:
    return float(sample.weights @ values) / sample.population_size


def _checked_propensity(inputs: EstimationInputs) -> np.ndarray:
    p = inputs.fitted_propensity.probabilities(inputs.b_sample.frame)
    low = float(p.min())
    if low < _MIN_PROPENSITY:
        raise ExtremeWeightError(f"estimated propensity {low:.3g} is below {_MIN_PROPENSITY:g}")
    return p


def _fit(method: Method, inputs: EstimationInputs, g: GFunction) -> _Fit:
    a, b = inputs.sample_a, inputs.b_sample
    N = inputs.population_size
    if a.n == 0 or b.n == 0:
        raise EmptyFrameError("both samples need at least one row")
    match method:
        case Method.HT:
            if a.frame.q == 0:
                raise SchemaError("the HT benchmark needs outcomes observed on Sample A")
            values = g_values(g, a.frame.y)
            return _Fit(_ht_mean(values, a), a_values=values)
        case Method.NNI:
            values = impute_values(inputs.donors(1), b, g)
            # SYG double sum on imputed values; a 1/N-scaled variant overstates it by about N/n
            return _Fit(_ht_mean(values, a), a_values=values, form="syg", meta={"k": 1})
        case Method.KNN:
            values = impute_values(inputs.donors(inputs.k), b, g)
            return _Fit(_ht_mean(values, a), a_values=values, meta={"k": inputs.k})
        case Method.GAM:
            model = fit_gam(b, g, inputs.gam_config)
            values = model.predict(a.frame.x)
            return _Fit(_ht_mean(values, a), a_values=values, meta=model.diagnostics())
        case Method.RC:
            fit = rc_fit(a, inputs.donors(1), b, g, inputs.calibration)
            return _Fit(fit.estimate, a_values=fit.residuals, meta=fit.calibration.diagnostics())
        case Method.IPW:
            p = _checked_propensity(inputs)
            gb = g_values(g, b.frame.y)
            return _Fit(float(np.sum(gb / p)) / N, b_values=gb, propensity=p, meta={"approximate": True})
        case Method.DR:
            p = _checked_propensity(inputs)
            covs = inputs.outcome_covariates
            gb = g_values(g, b.frame.y)
            beta = fit_outcome_regression(b, gb, covs)
            resid = gb - _features(b.frame, covs) @ beta
            predicted = _features(a.frame, covs) @ beta
            estimate = float(np.sum(resid / p)) / N + _ht_mean(predicted, a)
            return _Fit(
                estimate,
                a_values=predicted,
                b_values=resid,
                propensity=p,
                meta={"approximate": True, "beta": beta.tolist()},
            )
    raise ValueError(f"unknown method {method!r}")


def _variance(fit: _Fit, inputs: EstimationInputs) -> float:
    total = 0.0
    if fit.a_values is not None:
        total += design_variance(fit.a_values, inputs.sample_a, fit.form)
    if fit.b_values is not None and fit.propensity is not None:
        p = fit.propensity
        total += float(np.sum((1.0 - p) / p**2 * fit.b_values**2)) / inputs.population_size**2
    return total


def _report(method: Method, fit: _Fit, inputs: EstimationInputs) -> EstimateReport:
    return EstimateReport.build(method, fit.estimate, _variance(fit, inputs), variance_form=fit.form, **fit.meta)


# --- public estimators ---------------------------------------------------------------


def estimate(method: Method | str, inputs: EstimationInputs, g: GFunction) -> EstimateReport:
    """Dispatch to one of the seven estimators."""
    method = Method(str(method).upper())
    return _report(method, _fit(method, inputs, g), inputs)


def estimate_ht(sample: ProbabilitySample, g: GFunction) -> EstimateReport:
    if sample.frame.q == 0:
        raise SchemaError("the HT benchmark needs outcomes observed on Sample A")
    values = g_values(g, sample.frame.y)
    return EstimateReport.build(Method.HT, _ht_mean(values, sample), design_variance(values, sample, "ht"),
                                variance_form="ht")


def estimate_nni(sample_a: ProbabilitySample, b_sample: BigSample, g: GFunction) -> EstimateReport:
    """Nearest-neighbour mass imputation; the variance is the Sen-Yates-Grundy form on the imputed values."""
    return estimate(Method.NNI, EstimationInputs(sample_a, b_sample, k=1), g)


def estimate_knn(sample_a: ProbabilitySample, b_sample: BigSample, g: GFunction, k: int = 5) -> EstimateReport:
    return estimate(Method.KNN, EstimationInputs(sample_a, b_sample, k=k), g)


def estimate_gam(
    sample_a: ProbabilitySample, b_sample: BigSample, g: GFunction, gam_config: GamConfig | None = None
) -> EstimateReport:
    return estimate(Method.GAM, EstimationInputs(sample_a, b_sample, gam_config=gam_config or GamConfig()), g)


def estimate_ipw(
    b_sample: BigSample, propensity: PropensityModel, population_size: int, g: GFunction
) -> EstimateReport:
    p = propensity.probabilities(b_sample.frame)
    if p.min() < _MIN_PROPENSITY:
        raise ExtremeWeightError(f"estimated propensity {p.min():.3g} is below {_MIN_PROPENSITY:g}")
    gb = g_values(g, b_sample.frame.y)
    variance = float(np.sum((1.0 - p) / p**2 * gb**2)) / population_size**2
    return EstimateReport.build(Method.IPW, float(np.sum(gb / p)) / population_size, variance, approximate=True)


def estimate_dr(
    sample_a: ProbabilitySample,
    b_sample: BigSample,
    propensity: PropensityModel,
    g: GFunction,
    outcome_covariates: tuple[str, ...] | None = None,
) -> EstimateReport:
    inputs = EstimationInputs(sample_a, b_sample, propensity=propensity, om_covariates=outcome_covariates)
    return estimate(Method.DR, inputs, g)


def estimate_conditional_mean(
    method: Method | str,
    inputs: EstimationInputs,
    g_num: GFunction | None = None,
    g_den: GFunction | None = None,
) -> EstimateReport:
    """Ratio mu_num / mu_den (default E[Y1 | Y2 = 1]) with a linearised variance."""
    method = Method(str(method).upper())
    g_num = g_num or Product(0, 1)
    g_den = g_den or Identity(1)
    num = _fit(method, inputs, g_num)
    den = _fit(method, inputs, g_den)
    if den.estimate <= 0.0:
        raise RatioUndefinedError(f"denominator estimate {den.estimate:.6g} is not positive")
    ratio = num.estimate / den.estimate

    def linearise(top: np.ndarray | None, bottom: np.ndarray | None) -> np.ndarray | None:
        if top is None or bottom is None:
            return None
        return (top - ratio * bottom) / den.estimate

    combined = _Fit(
        ratio,
        a_values=linearise(num.a_values, den.a_values),
        b_values=linearise(num.b_values, den.b_values),
        propensity=num.propensity,
        form=num.form,
        meta={**num.meta, "numerator": num.estimate, "denominator": den.estimate},
    )
    return _report(method, combined, inputs)
