"""Additive models with penalised cubic regression splines.

Each covariate gets a clamped B-spline basis with quantile knots and an
integrated squared second-derivative penalty. Blocks are centred over the
training rows and reparametrised onto their sum-to-zero null space, so the
model is identifiable alongside an explicit intercept. Coefficients are fit
by penalised IRLS; the shared smoothing parameter is chosen by GCV over a
log-spaced grid unless fixed in the config.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.polynomial.legendre import leggauss
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import linalg
from scipy.interpolate import BSpline
from scipy.special import expit, logit, xlogy

from massfuse.errors import BasisError, ConfigError, ConvergenceError, DimensionError, EmptyFrameError, ModelError
from massfuse.frame import BigSample, GFunction, g_values

log = logging.getLogger(__name__)

Link = Literal["identity", "logit"]

_RIDGE = 1e-10
_MU_CLIP = 1e-10


class GamConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    n_basis: int = Field(10, ge=2)
    degree: int = Field(3, ge=1)
    link: Literal["auto", "identity", "logit"] = "auto"
    lam: float | list[float] | None = None
    grid_size: int = Field(30, ge=1)
    grid_min: float = Field(1e-6, gt=0)
    grid_max: float = Field(1e6, gt=0)
    max_iter: int = Field(100, ge=1)
    tol: float = Field(1e-8, gt=0)

    @model_validator(mode="after")
    def _check(self) -> GamConfig:
        if self.n_basis < self.degree + 1:
            raise ValueError(f"n_basis={self.n_basis} is too small for degree {self.degree}")
        if self.grid_max < self.grid_min:
            raise ValueError("grid_max must be at least grid_min")
        lams = self.lam if isinstance(self.lam, list) else [self.lam] if self.lam is not None else []
        if any(v < 0 for v in lams):
            raise ValueError("smoothing parameters must be non-negative")
        return self

    def grid(self) -> np.ndarray:
        return np.logspace(np.log10(self.grid_min), np.log10(self.grid_max), self.grid_size)


# --- basis and penalty ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SplineBasis:
    degree: int
    interior_knots: np.ndarray
    boundary_knots: tuple[float, float]

    @property
    def n_basis(self) -> int:
        return self.interior_knots.size + self.degree + 1

    @property
    def knots(self) -> np.ndarray:
        lo, hi = self.boundary_knots
        k = self.degree + 1
        return np.concatenate([np.full(k, lo), self.interior_knots, np.full(k, hi)])

    def clamp(self, x: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), *self.boundary_knots)

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Dense (len(x), M) basis matrix; x outside the boundary is clamped."""
        return BSpline.design_matrix(self.clamp(x), self.knots, self.degree).toarray()

    def second_derivative(self, x: np.ndarray) -> np.ndarray:
        m = self.n_basis
        if self.degree < 2:
            return np.zeros((np.size(x), m))
        return BSpline(self.knots, np.eye(m), self.degree).derivative(2)(np.asarray(x, dtype=float))


@dataclass(frozen=True, eq=False)
class PenaltyMatrix:
    S: np.ndarray


def build_basis(x_column: np.ndarray, M: int = 10, degree: int = 3) -> SplineBasis:
    """B-spline basis with interior knots at equally spaced quantiles of the column."""
    x = np.asarray(x_column, dtype=float).reshape(-1)
    if M < degree + 1:
        raise BasisError(f"M={M} basis functions cannot carry degree {degree}")
    distinct = np.unique(x)
    if distinct.size < M:
        raise BasisError(f"column has {distinct.size} distinct values, need at least {M}")
    lo, hi = float(distinct[0]), float(distinct[-1])
    n_interior = M - degree - 1
    interior = np.quantile(x, np.linspace(0.0, 1.0, n_interior + 2)[1:-1])
    knots = np.concatenate([[lo], interior, [hi]])
    if np.any(np.diff(knots) <= 0):
        raise BasisError("quantile knots are not strictly increasing; the column has too many tied values")
    return SplineBasis(degree=degree, interior_knots=interior, boundary_knots=(lo, hi))


def penalty_matrix(basis: SplineBasis) -> PenaltyMatrix:
    """S_ml = integral of B_m'' B_l'' by Gauss-Legendre quadrature per knot interval."""
    m = basis.n_basis
    if basis.degree < 2:
        return PenaltyMatrix(np.zeros((m, m)))
    nodes, weights = leggauss(max(2, basis.degree))
    breaks = np.concatenate([[basis.boundary_knots[0]], basis.interior_knots, [basis.boundary_knots[1]]])
    half = np.diff(breaks) / 2.0
    mid = (breaks[:-1] + breaks[1:]) / 2.0
    points = (mid[:, None] + half[:, None] * nodes[None, :]).ravel()
    w = (half[:, None] * weights[None, :]).ravel()
    d2 = basis.second_derivative(points)
    S = d2.T @ (w[:, None] * d2)
    return PenaltyMatrix((S + S.T) / 2.0)


# --- model ---------------------------------------------------------------------


def _inverse_link(eta: np.ndarray, link: Link) -> np.ndarray:
    return expit(eta) if link == "logit" else eta


def _deviance(y: np.ndarray, mu: np.ndarray, link: Link) -> float:
    if link == "logit":
        mu = np.clip(mu, _MU_CLIP, 1.0 - _MU_CLIP)
        return float(-2.0 * np.sum(xlogy(y, mu) + xlogy(1.0 - y, 1.0 - mu)))
    r = y - mu
    return float(r @ r)


@dataclass(frozen=True, eq=False)
class GamModel:
    """A fitted additive model. ``coef`` is [intercept, gamma_1, ..., gamma_p]."""

    n_covariates: int
    bases: tuple[SplineBasis, ...]
    column_means: tuple[np.ndarray, ...]
    gammas: tuple[np.ndarray, ...]
    intercept: float
    link: Link
    lam: tuple[float, ...]
    penalties: tuple[np.ndarray, ...]
    deviance: float
    edf: float
    gcv: float
    fitted: np.ndarray
    iterations: int
    ridge_applied: bool = False
    gcv_path: tuple[tuple[float, float, float], ...] = field(default=())

    @property
    def coef(self) -> np.ndarray:
        return np.concatenate([[self.intercept], *self.gammas])

    def _check_x(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.n_covariates:
            raise DimensionError(f"model has {self.n_covariates} covariates, got {x.shape[1]}")
        return x

    def design_matrix(self, x: np.ndarray) -> np.ndarray:
        """Rows [1, B_1(x_1) - m_1, ..., B_p(x_p) - m_p] matching ``coef``."""
        x = self._check_x(x)
        blocks = [np.ones((x.shape[0], 1))]
        for k, (basis, mean) in enumerate(zip(self.bases, self.column_means)):
            blocks.append(basis.evaluate(x[:, k]) - mean)
        return np.hstack(blocks)

    def penalty(self) -> np.ndarray:
        """Block-diagonal penalty diag(0, lam_1 S_1, ..., lam_p S_p) in ``coef`` coordinates."""
        return linalg.block_diag(np.zeros((1, 1)), *(lam * S for lam, S in zip(self.lam, self.penalties)))

    def linear_predictor(self, x: np.ndarray) -> np.ndarray:
        x = self._check_x(x)
        eta = np.full(x.shape[0], self.intercept)
        for k, (basis, mean, gamma) in enumerate(zip(self.bases, self.column_means, self.gammas)):
            eta += (basis.evaluate(x[:, k]) - mean) @ gamma
        return eta

    def predict(self, x: np.ndarray) -> np.ndarray:
        return _inverse_link(self.linear_predictor(x), self.link)

    def diagnostics(self) -> dict[str, object]:
        return {
            "link": self.link,
            "lam": list(self.lam),
            "edf": self.edf,
            "gcv": self.gcv,
            "deviance": self.deviance,
            "iterations": self.iterations,
            "ridge_applied": self.ridge_applied,
        }


def predict(model: GamModel, x: np.ndarray) -> float | np.ndarray:
    """h(eta) for one covariate vector, or for each row of a matrix."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        return float(model.predict(arr.reshape(1, -1))[0])
    return model.predict(arr)


def penalized_objective(model: GamModel, x: np.ndarray, values: np.ndarray, coef: np.ndarray | None = None) -> float:
    """Deviance plus sum_k lam_k gamma_k' S_k gamma_k at ``coef`` (defaults to the fitted coefficients)."""
    coef = model.coef if coef is None else np.asarray(coef, dtype=float)
    mu = _inverse_link(model.design_matrix(x) @ coef, model.link)
    return _deviance(np.asarray(values, dtype=float), mu, model.link) + float(coef @ model.penalty() @ coef)


def penalized_gradient(model: GamModel, x: np.ndarray, values: np.ndarray, coef: np.ndarray | None = None) -> np.ndarray:
    """Analytic gradient of penalized_objective; both links are canonical."""
    coef = model.coef if coef is None else np.asarray(coef, dtype=float)
    X = model.design_matrix(x)
    mu = _inverse_link(X @ coef, model.link)
    return -2.0 * X.T @ (np.asarray(values, dtype=float) - mu) + 2.0 * model.penalty() @ coef


# --- fitting -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Design:
    X: np.ndarray  # [1, (B_k - m_k) Z_k ...]
    bases: tuple[SplineBasis, ...]
    means: tuple[np.ndarray, ...]
    nulls: tuple[np.ndarray, ...]  # Z_k, M_k x (M_k - 1)
    penalties: tuple[np.ndarray, ...]  # S_k
    roots: tuple[np.ndarray, ...]  # E_k with E_k'E_k = Z_k' S_k Z_k


@dataclass(frozen=True, eq=False)
class _Fit:
    theta: np.ndarray
    mu: np.ndarray
    deviance: float
    objective: float
    edf: float
    iterations: int
    ridge_applied: bool


def _psd_root(A: np.ndarray) -> np.ndarray:
    vals, vecs = linalg.eigh((A + A.T) / 2.0)
    return np.sqrt(np.clip(vals, 0.0, None))[:, None] * vecs.T


def _build_design(x: np.ndarray, bases: list[SplineBasis]) -> _Design:
    blocks = [np.ones((x.shape[0], 1))]
    means, nulls, penalties, roots = [], [], [], []
    for k, basis in enumerate(bases):
        B = basis.evaluate(x[:, k])
        mean = B.mean(axis=0)
        Z = linalg.null_space(np.ones((1, basis.n_basis)))
        S = penalty_matrix(basis).S
        blocks.append((B - mean) @ Z)
        means.append(mean)
        nulls.append(Z)
        penalties.append(S)
        roots.append(_psd_root(Z.T @ S @ Z))
    return _Design(np.hstack(blocks), tuple(bases), tuple(means), tuple(nulls), tuple(penalties), tuple(roots))


def _penalty_root(design: _Design, lams: tuple[float, ...]) -> np.ndarray:
    """Stacked D with D'D = blockdiag(0, lam_k Z_k' S_k Z_k)."""
    return linalg.block_diag(np.zeros((0, 1)), *(np.sqrt(lam) * E for lam, E in zip(lams, design.roots)))


def _weighted_solve(X: np.ndarray, w: np.ndarray, z: np.ndarray, D: np.ndarray) -> tuple[np.ndarray, float, bool]:
    """Minimise |W^1/2 (z - X theta)|^2 + |D theta|^2 by QR; also returns tr(H)."""
    n, m = X.shape
    sw = np.sqrt(w)
    aug = np.vstack([X * sw[:, None], D])
    rhs = np.concatenate([z * sw, np.zeros(D.shape[0])])
    q, r = linalg.qr(aug, mode="economic")
    diag = np.abs(np.diag(r))
    ridge = bool(diag.min() <= 1e-10 * diag.max())
    if ridge:
        log.warning("Penalised normal matrix is singular; adding a %g ridge", _RIDGE)
        aug = np.vstack([aug, np.sqrt(_RIDGE) * np.eye(m)])
        rhs = np.concatenate([rhs, np.zeros(m)])
        q, r = linalg.qr(aug, mode="economic")
    theta = linalg.solve_triangular(r, q.T @ rhs)
    edf = float(np.sum(q[:n] ** 2))
    return theta, edf, ridge


def _working(eta: np.ndarray, mu: np.ndarray, y: np.ndarray, link: Link) -> tuple[np.ndarray, np.ndarray]:
    if link == "identity":
        return np.ones_like(y), y
    mu = np.clip(mu, _MU_CLIP, 1.0 - _MU_CLIP)
    w = mu * (1.0 - mu)
    return w, eta + (y - mu) / w


def _pirls(
    X: np.ndarray,
    y: np.ndarray,
    D: np.ndarray,
    link: Link,
    *,
    max_iter: int,
    tol: float,
    start: np.ndarray | None = None,
) -> _Fit:
    def evaluate(theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, float, float]:
        eta = X @ theta
        mu = _inverse_link(eta, link)
        dev = _deviance(y, mu, link)
        return eta, mu, dev, dev + float(np.sum((D @ theta) ** 2))

    if start is not None:
        theta = start
        eta, mu, dev, obj = evaluate(theta)
    else:
        theta = None
        mu = (y + 0.5) / 2.0 if link == "logit" else y.astype(float)
        eta = logit(mu) if link == "logit" else mu
        dev, obj = np.inf, np.inf

    ridge = False
    for it in range(1, max_iter + 1):
        w, z = _working(eta, mu, y, link)
        trial, edf, used_ridge = _weighted_solve(X, w, z, D)
        ridge |= used_ridge
        t_eta, t_mu, t_dev, t_obj = evaluate(trial)

        if theta is not None and t_obj > obj + 1e-12 * abs(obj):
            step = 1.0
            while t_obj > obj and step > 1e-6:
                step /= 2.0
                trial = theta + step * (trial - theta)
                t_eta, t_mu, t_dev, t_obj = evaluate(trial)
            if t_obj > obj:
                # no descent left from the current iterate
                return _Fit(theta, mu, dev, obj, edf, it, ridge)

        change = np.inf if theta is None else float(np.linalg.norm(trial - theta) / (np.linalg.norm(trial) + 1e-12))
        theta, eta, mu, dev, obj = trial, t_eta, t_mu, t_dev, t_obj
        # a single weighted least-squares solve is exact for the identity link
        if link == "identity" or change < tol:
            return _Fit(theta, mu, dev, obj, edf, it, ridge)

    raise ConvergenceError(f"P-IRLS did not converge within {max_iter} iterations", last_value=dev)


def _resolve_link(values: np.ndarray, link: str) -> Link:
    binary = bool(np.all((values == 0.0) | (values == 1.0)))
    if link == "auto":
        return "logit" if binary and np.ptp(values) > 0 else "identity"
    if link == "logit" and not binary:
        raise ModelError("the logit link needs responses coded 0/1")
    return link  # type: ignore[return-value]


def _gcv(n: int, deviance: float, edf: float) -> float:
    return n * deviance / (n - edf) ** 2 if edf < n else np.inf


def fit_additive(x: np.ndarray, values: np.ndarray, config: GamConfig | None = None) -> GamModel:
    """Fit h^-1(E[v | x]) = intercept + sum_k f_k(x_k) to the rows of ``x``."""
    config = config or GamConfig()
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(values, dtype=float).reshape(-1)
    n, p = x.shape
    if n == 0:
        raise EmptyFrameError("cannot fit a GAM to zero rows")
    if y.size != n:
        raise DimensionError(f"{n} covariate rows but {y.size} responses")
    link = _resolve_link(y, config.link)

    if np.ptp(y) == 0.0:
        return GamModel(
            n_covariates=p,
            bases=(),
            column_means=(),
            gammas=(),
            intercept=float(y[0]),
            link="identity",
            lam=(),
            penalties=(),
            deviance=0.0,
            edf=1.0,
            gcv=0.0,
            fitted=np.full(n, float(y[0])),
            iterations=0,
        )

    bases = [build_basis(x[:, k], config.n_basis, config.degree) for k in range(p)]
    design = _build_design(x, bases)

    if config.lam is None:
        path: list[tuple[float, float, float]] = []
        fits: list[tuple[float, _Fit]] = []
        start = None
        for lam in config.grid():
            fit = _pirls(
                design.X, y, _penalty_root(design, (lam,) * p), link, max_iter=config.max_iter, tol=config.tol,
                start=start,
            )
            start = fit.theta
            path.append((float(lam), _gcv(n, fit.deviance, fit.edf), fit.edf))
            fits.append((float(lam), fit))
        best = min(range(len(path)), key=lambda i: path[i][1])
        lam_best, fit = fits[best]
        lams = (lam_best,) * p
        log.debug("GCV selected lambda=%g (edf=%.2f, gcv=%.6g)", lam_best, fit.edf, path[best][1])
        gcv_path = tuple(path)
    else:
        lams = tuple(float(v) for v in config.lam) if isinstance(config.lam, list) else (float(config.lam),) * p
        if len(lams) != p:
            raise ConfigError(f"{len(lams)} smoothing parameters given for {p} covariates")
        fit = _pirls(design.X, y, _penalty_root(design, lams), link, max_iter=config.max_iter, tol=config.tol)
        gcv_path = ()

    offsets = np.cumsum([1] + [Z.shape[1] for Z in design.nulls])
    gammas = tuple(Z @ fit.theta[offsets[k] : offsets[k + 1]] for k, Z in enumerate(design.nulls))
    return GamModel(
        n_covariates=p,
        bases=design.bases,
        column_means=design.means,
        gammas=gammas,
        intercept=float(fit.theta[0]),
        link=link,
        lam=lams,
        penalties=design.penalties,
        deviance=fit.deviance,
        edf=fit.edf,
        gcv=_gcv(n, fit.deviance, fit.edf),
        fitted=fit.mu,
        iterations=fit.iterations,
        ridge_applied=fit.ridge_applied,
        gcv_path=gcv_path,
    )


def fit_gam(b_sample: BigSample, g: GFunction, config: GamConfig | None = None) -> GamModel:
    """Fit the imputation model for g(Y) on Sample B."""
    return fit_additive(b_sample.frame.x, g_values(g, b_sample.frame.y), config)
