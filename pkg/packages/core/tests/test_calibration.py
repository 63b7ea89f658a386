"""Tests for regression calibration and the RC estimator."""

from __future__ import annotations

import numpy as np
import pytest
from massfuse.calibration import (
    CalibrationSpec,
    beta_hat,
    calibrate_weights,
    compute_benchmark,
    default_h,
    estimate_rc,
)
from massfuse.designs import SRSWOR, SelectionModel, draw_sample_a, draw_sample_b
from massfuse.errors import CollinearConstraintError
from massfuse.frame import Identity, Indicator
from massfuse.matching import match_knn
from scipy import linalg


def _kkt_oracle(d: np.ndarray, H: np.ndarray, totals: np.ndarray) -> np.ndarray:
    """Minimiser of sum (w - d)^2 / d subject to H'w = totals, from the full KKT system."""
    n, r = H.shape
    K = np.block([[np.diag(2.0 / d), H], [H.T, np.zeros((r, r))]])
    rhs = np.concatenate([np.full(n, 2.0), totals])
    return np.linalg.solve(K, rhs)[:n]


def _distance(w: np.ndarray, d: np.ndarray) -> float:
    return float(np.sum(d * (w / d - 1.0) ** 2))


@pytest.fixture
def small(make_frame):
    """A 20-unit Sample A from a 200-unit population with about 60% of units in Sample B."""
    rng = np.random.default_rng(314)
    pop = make_frame(rng.normal(size=(200, 2)), rng.normal(2.0, 1.0, 200))
    b = draw_sample_b(pop, SelectionModel.logistic_linear((0.3, 0.0), intercept=0.5), rng)
    a = draw_sample_a(b.population, SRSWOR(N=200, n=20), rng)
    return a, b


class TestCalibrateWeights:
    def test_one_dimensional_by_hand(self, make_frame):
        frame = make_frame([0.0, 1.0], [0.0, 0.0], delta_b=[True, False])
        sample = draw_sample_a(frame, SRSWOR(N=2, n=2), np.random.default_rng(0))
        spec = CalibrationSpec(target_totals=[3.0], h_map=lambda d, x, y: np.ones((np.size(d), 1)))
        result = calibrate_weights(sample, spec, np.zeros(2))
        assert result.lagrange.tolist() == pytest.approx([0.5])
        assert result.omega.tolist() == pytest.approx([1.5, 1.5])

    def test_constraints_achieved(self, small):
        a, b = small
        spec = CalibrationSpec.default(b, 200)
        result = calibrate_weights(a, spec, a.frame.y[:, 0])
        assert result.max_violation <= 1e-8
        assert result.achieved_totals == pytest.approx(spec.target_totals, rel=1e-8, abs=1e-8)

    def test_matches_quadratic_programme(self, small):
        a, b = small
        spec = CalibrationSpec.default(b, 200)
        y_star = a.frame.y[:, 0]
        result = calibrate_weights(a, spec, y_star)
        H = default_h(a.frame.delta_b, a.frame.x, y_star)
        oracle = _kkt_oracle(a.weights, H, spec.target_totals)
        assert result.omega == pytest.approx(oracle, rel=1e-8, abs=1e-8)
        assert _distance(result.omega, a.weights) <= _distance(oracle, a.weights) + 1e-8

    def test_random_instances_meet_constraints(self, make_frame, srs_sample):
        rng = np.random.default_rng(2718)
        for _ in range(100):
            n = int(rng.integers(10, 51))
            r = int(rng.integers(1, 6))
            x = rng.normal(size=(n, r))
            sample = srs_sample(make_frame(x, delta_b=np.ones(n, dtype=bool)), 10 * n)
            totals = (sample.weights * rng.uniform(0.8, 1.2, n)) @ x
            spec = CalibrationSpec(target_totals=totals, h_map=lambda d, cov, y: cov)
            result = calibrate_weights(sample, spec, np.zeros(n))
            assert result.max_violation <= 1e-8, (n, r)
            assert result.achieved_totals == pytest.approx(totals, rel=1e-8, abs=1e-8)

    def test_feasible_perturbations_are_farther(self, small):
        a, b = small
        spec = CalibrationSpec.default(b, 200)
        y_star = a.frame.y[:, 0]
        result = calibrate_weights(a, spec, y_star)
        null = linalg.null_space(default_h(a.frame.delta_b, a.frame.x, y_star).T)
        rng = np.random.default_rng(5)
        best = _distance(result.omega, a.weights)
        for _ in range(20):
            moved = result.omega + null @ rng.normal(0, 0.5, null.shape[1])
            assert best <= _distance(moved, a.weights) + 1e-8

    def test_already_calibrated_is_unchanged(self, make_frame):
        frame = make_frame(
            [0.5, 1.0, 2.0, 3.0, 4.0], [1.0, 3.0, 2.0, 0.0, 0.0], delta_b=[True, True, True, False, False]
        )
        sample = draw_sample_a(frame, SRSWOR(N=5, n=5), np.random.default_rng(0))
        totals = sample.weights @ default_h(frame.delta_b, frame.x, frame.y[:, 0])
        result = calibrate_weights(sample, CalibrationSpec(target_totals=totals), frame.y[:, 0])
        assert result.omega.tolist() == sample.weights.tolist()
        assert not result.lagrange.any()

    def test_idempotent(self, samples):
        a, b = samples
        spec = CalibrationSpec.default(b, a.population_size)
        y_star = a.frame.y[:, 0]
        first = calibrate_weights(a, spec, y_star)
        assert first.negative_weights == 0
        second = calibrate_weights(a, spec, y_star, base_weights=first.omega)
        assert second.omega == pytest.approx(first.omega, rel=1e-10)

    def test_collinear_constraints(self, samples):
        a, b = samples

        def h(d, x, y):
            d = np.asarray(d, dtype=float).reshape(-1)
            x = np.atleast_2d(x)
            return np.column_stack([d, 1.0 - d, d * x[:, 0], 2.0 * d * x[:, 0]])

        totals = compute_benchmark(b, a.population_size, h_map=h)
        spec = CalibrationSpec(totals, h_map=h, components=("delta_b", "1-delta_b", "x1", "twice_x1"))
        with pytest.raises(CollinearConstraintError) as excinfo:
            calibrate_weights(a, spec, a.frame.y[:, 0])
        assert excinfo.value.component in {"x1", "twice_x1"}

    def test_census_b_makes_off_sample_component_vacuous(self, population):
        census = SelectionModel.logistic_linear((0.0, 0.0), intercept=50.0)
        b = draw_sample_b(population, census, np.random.default_rng(1))
        a = draw_sample_a(b.population, SRSWOR(N=population.n_rows, n=100), np.random.default_rng(2))
        spec = CalibrationSpec.default(b, population.n_rows)
        result = calibrate_weights(a, spec, a.frame.y[:, 0])
        assert result.vacuous == ("1-delta_b",)
        assert result.lagrange[1] == 0.0
        assert result.max_violation <= 1e-8

    def test_absent_component_with_nonzero_benchmark(self, make_frame):
        frame = make_frame([0.0, 1.0], [0.0, 0.0], delta_b=[True, True])
        sample = draw_sample_a(frame, SRSWOR(N=2, n=2), np.random.default_rng(0))
        spec = CalibrationSpec(
            target_totals=[2.0, 5.0],
            h_map=lambda d, x, y: np.column_stack([d, 1.0 - d]),
            components=("delta_b", "1-delta_b"),
        )
        with pytest.raises(CollinearConstraintError) as excinfo:
            calibrate_weights(sample, spec, np.zeros(2))
        assert excinfo.value.component == "1-delta_b"

    def test_flags_required(self, make_frame, srs_sample):
        sample = srs_sample(make_frame([0.0, 1.0]), 4)
        with pytest.raises(ValueError, match="delta_b"):
            calibrate_weights(sample, CalibrationSpec(target_totals=[4.0, 0.0, 1.0, 1.0]), np.zeros(2))

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            CalibrationSpec(target_totals=[])
        with pytest.raises(ValueError):
            CalibrationSpec(target_totals=[1.0, np.nan])
        with pytest.raises(ValueError):
            CalibrationSpec(target_totals=[1.0], components=("a", "b"))


class TestBenchmark:
    def test_default_totals(self, samples):
        a, b = samples
        N = a.population_size
        totals = compute_benchmark(b, N)
        assert totals[0] == b.n
        assert totals[1] == N - b.n
        assert totals[2] == pytest.approx(b.frame.x[:, 0].sum())
        assert totals[-1] == pytest.approx(b.frame.y[:, 0].sum())

    def test_component_names(self, samples):
        _, b = samples
        spec = CalibrationSpec.default(b, 3000)
        assert spec.components == ("delta_b", "1-delta_b", "delta_b*x1", "delta_b*x2", "delta_b*y1")


class TestBetaHat:
    @pytest.fixture
    def enumerable(self, make_frame):
        """N=50 with roughly half the units in Sample B and a 10-unit Sample A."""
        rng = np.random.default_rng(50)
        pop = make_frame(rng.normal(size=(50, 2)), rng.normal(1.0, 2.0, 50))
        b = draw_sample_b(pop, SelectionModel.logistic_linear((0.5, 0.0)), rng)
        a = draw_sample_a(b.population, SRSWOR(N=50, n=10), rng)
        return a, b, match_knn(a.frame.x, b.frame.x, k=1)

    def test_membership_only_gives_b_mean(self, enumerable):
        a, b, match = enumerable
        spec = CalibrationSpec(target_totals=[float(b.n)], h_map=lambda d, x, y: np.asarray(d, float).reshape(-1, 1))
        beta = beta_hat(a, match, b, Identity(0), spec)
        assert beta.tolist() == pytest.approx([b.frame.y[:, 0].mean()], rel=1e-12)

    def test_zero_response(self, enumerable):
        a, b, match = enumerable
        beta = beta_hat(a, match, b, Indicator(0, -np.inf))
        assert np.all(beta == 0.0)

    def test_matches_dense_enumeration(self, enumerable):
        a, b, match = enumerable
        pop = b.population
        in_b = pop.delta_b
        H = default_h(in_b, pop.x, pop.y[:, 0])
        y_star = b.frame.y[match.donor_indices[:, 0], 0]
        off_b = ~a.frame.delta_b
        off = float(np.sum(y_star[off_b] / a.pi[off_b]))
        h0 = default_h(np.zeros(1), np.zeros((1, 2)), np.zeros(1))[0]
        expected = np.linalg.solve(H.T @ H, H[in_b].T @ pop.y[in_b, 0] + off * h0)
        assert beta_hat(a, match, b, Identity(0)) == pytest.approx(expected, rel=1e-8, abs=1e-10)


class TestEstimateRc:
    def test_census_gives_population_mean(self, population):
        census = SelectionModel.logistic_linear((0.0, 0.0), intercept=50.0)
        b = draw_sample_b(population, census, np.random.default_rng(1))
        N = population.n_rows
        a = draw_sample_a(b.population, SRSWOR(N=N, n=N), np.random.default_rng(2))
        report = estimate_rc(a, match_knn(a.frame.x, b.frame.x, k=1), b, Identity(0))
        assert report.estimate == pytest.approx(population.y[:, 0].mean(), rel=1e-10)
        assert report.variance == pytest.approx(0.0, abs=1e-12)

    def test_constant_g_is_exact(self, samples):
        a, b = samples
        always = Indicator(0, np.inf)
        report = estimate_rc(a, match_knn(a.frame.x, b.frame.x, k=1), b, always)
        assert report.estimate == pytest.approx(1.0, abs=1e-10)

    def test_report_metadata(self, samples):
        a, b = samples
        report = estimate_rc(a, match_knn(a.frame.x, b.frame.x, k=1), b, Identity(0))
        assert report.method == "RC"
        assert report.meta["variance_form"] == "ht"
        assert report.meta["max_violation"] <= 1e-8
        assert len(report.meta["beta"]) == 5
