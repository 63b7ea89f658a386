"""Design-based variance of a Horvitz-Thompson mean N^-1 sum_A v_i / pi_i."""

from __future__ import annotations

import logging
from typing import Literal

import numpy as np

from massfuse.designs import StratifiedSRSWOR, joint_matrix
from massfuse.errors import VarianceUndefinedError
from massfuse.frame import ProbabilitySample

log = logging.getLogger(__name__)

VarianceForm = Literal["ht", "syg"]


def stratified_variance(values: np.ndarray, sample: ProbabilitySample) -> float:
    """N^-2 sum_h N_h^2 (1 - n_h/N_h) s_h^2 / n_h."""
    design = sample.design
    if not isinstance(design, StratifiedSRSWOR):
        raise TypeError("stratified_variance needs a StratifiedSRSWOR sample")
    positions = design.positions(sample.unit_index)
    total = 0.0
    for k, stratum in enumerate(design.strata):
        v = values[positions == k]
        n_h = v.size
        if n_h == 0 or n_h == stratum.N:
            continue
        if n_h == 1:
            raise VarianceUndefinedError(f"stratum {stratum.label} holds a single sampled unit")
        s2 = float(np.var(v, ddof=1))
        total += stratum.N**2 * (1.0 - n_h / stratum.N) * s2 / n_h
    return total / sample.population_size**2


def ht_variance(values: np.ndarray, sample: ProbabilitySample) -> float:
    """sum_ij (pi_ij - pi_i pi_j) / pi_ij * (v_i/pi_i)(v_j/pi_j) / N^2."""
    pi = sample.pi
    joint = joint_matrix(sample.design, sample.unit_index)
    u = values / pi
    delta = (joint - np.outer(pi, pi)) / joint
    return float(u @ delta @ u) / sample.population_size**2


def syg_variance(values: np.ndarray, sample: ProbabilitySample) -> float:
    """Sen-Yates-Grundy form: 1/2 sum_{i!=j} (pi_i pi_j - pi_ij)/pi_ij (u_i - u_j)^2 / N^2."""
    pi = sample.pi
    joint = joint_matrix(sample.design, sample.unit_index)
    u = values / pi
    w = (np.outer(pi, pi) - joint) / joint
    np.fill_diagonal(w, 0.0)
    return float(u**2 @ w.sum(axis=1) - u @ w @ u) / sample.population_size**2


def design_variance(values: np.ndarray, sample: ProbabilitySample, form: VarianceForm = "ht") -> float:
    """Estimated variance of N^-1 sum_A v_i / pi_i under the sample's design.

    Stratified SRSWOR always uses its closed form, which both double sums reduce to.
    """
    values = np.asarray(values, dtype=float).reshape(-1)
    if values.size != sample.n:
        raise ValueError(f"expected {sample.n} values, got {values.size}")
    if isinstance(sample.design, StratifiedSRSWOR):
        v = stratified_variance(values, sample)
    elif form == "syg":
        v = syg_variance(values, sample)
    else:
        v = ht_variance(values, sample)
    if v < 0.0:
        log.debug("Clipping negative %s variance %.3g to zero", form, v)
        v = 0.0
    return v
