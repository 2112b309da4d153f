"""
Unit tests for init_kmeans: cluster assignment, the chi-square CDF, the quantile variance
estimator and one-step k-means.
"""

import os, sys, math
import unittest
import numpy as np
from scipy import integrate
from scipy.special import gammaln
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
from Method.core_model import Dataset
from Method.init_kmeans import (assign_clusters, chi_square_cdf, regularized_lower_gamma, alpha_d, quantile_margin,
                                estimate_variance_quantile, one_step_kmeans, kmeans_bounds_hold)
from Method.utils import InvalidSpecError, ClusterTooSmallError, EmptyComponentError, DimensionMismatchError
from Preprocessing.synth import SeededRng, make_separated_spec, sample_dataset, displace_means


def chi_square_cdf_by_quadrature(dof, x):
    # substituting t = u^2 removes the t^(dof/2 - 1) singularity at 0 for dof = 1
    a = dof / 2.0
    log_norm = -a * math.log(2.0) - float(gammaln(a))
    def integrand(u):
        t = u * u
        if t == 0.0:
            return 2.0 * math.exp(log_norm) if dof == 1 else 0.0
        return 2.0 * u * math.exp(log_norm + (a - 1.0) * math.log(t) - t / 2.0)
    upper = math.sqrt(x)
    # split the range at the mode so quad resolves the peak for large dof
    mode = math.sqrt(max(dof - 2.0, 0.0))
    points = [p for p in (mode - 5.0, mode, mode + 5.0) if 0.0 < p < upper]
    value, _ = integrate.quad(integrand, 0.0, upper, points=points or None, limit=500, epsabs=1e-13, epsrel=1e-12)
    return value


class TestChiSquareCdf(unittest.TestCase):

    def test_closed_forms(self):
        self.assertAlmostEqual(chi_square_cdf(2, 2.0), 1.0 - math.exp(-1.0), delta=1e-12)
        self.assertAlmostEqual(chi_square_cdf(1, 1.0), math.erf(1.0 / math.sqrt(2.0)), delta=1e-12)

    def test_at_zero(self):
        self.assertEqual(chi_square_cdf(3, 0.0), 0.0)

    def test_negative_x(self):
        with self.assertRaises(InvalidSpecError):
            chi_square_cdf(3, -1.0)

    def test_bad_dof(self):
        with self.assertRaises(InvalidSpecError):
            chi_square_cdf(0, 1.0)

    def test_non_finite_inputs(self):
        for dof, x in ((math.inf, 1.0), (math.nan, 1.0), (3, math.nan)):
            with self.assertRaises(InvalidSpecError, msg=f"dof={dof}, x={x}"):
                chi_square_cdf(dof, x)
        with self.assertRaises(InvalidSpecError):
            regularized_lower_gamma(math.inf, 2.0)
        self.assertEqual(chi_square_cdf(3, math.inf), 1.0)

    def test_agrees_with_quadrature(self):
        generator = np.random.default_rng(7)
        points = []
        for dof in (1, 2, 5, 50, 1000):
            for x in (0.01, 0.5 * dof, float(dof), 1.5 * dof, dof + 3.0 * math.sqrt(2.0 * dof)):
                points.append((dof, x))
        while len(points) < 200:
            dof = int(generator.integers(1, 200))
            x = float(generator.uniform(0.0, 2.5 * dof + 10.0))
            points.append((dof, x))
        for dof, x in points:
            self.assertAlmostEqual(chi_square_cdf(dof, x), chi_square_cdf_by_quadrature(dof, x), delta=1e-8,
                                   msg=f"dof {dof}, x {x}")

    def test_monotone_in_x(self):
        values = [chi_square_cdf(10, x) for x in np.linspace(0.0, 40.0, 81)]
        self.assertTrue(all(after >= before for before, after in zip(values, values[1:])))

    def test_incomplete_gamma_limits(self):
        self.assertEqual(regularized_lower_gamma(2.5, math.inf), 1.0)
        with self.assertRaises(InvalidSpecError):
            regularized_lower_gamma(0.0, 1.0)

    def test_alpha_d_slightly_above_half(self):
        for d in (1, 4, 16, 64, 256):
            self.assertGreater(alpha_d(d), 0.5)
            self.assertLess(alpha_d(d), 0.7)

    def test_quantile_margin(self):
        for d in (4, 8, 16, 64, 256, 1024):
            lower, alpha, upper = quantile_margin(d)
            self.assertGreaterEqual(alpha - lower, 0.1, msg=f"d {d}")
            self.assertGreaterEqual(upper - alpha, 0.1, msg=f"d {d}")


class TestVarianceQuantile(unittest.TestCase):

    def test_two_points(self):
        # one adjacent distance ||(3, 4)||^2 = 25, d = 2
        self.assertEqual(estimate_variance_quantile([[0.0, 0.0], [3.0, 4.0]]), 25.0 / 4.0)

    def test_singleton(self):
        with self.assertRaises(ClusterTooSmallError) as ctx:
            estimate_variance_quantile([[1.0, 2.0]], component=3)
        self.assertEqual(ctx.exception.component, 3)
        self.assertEqual(ctx.exception.size, 1)

    def test_dimension_mismatch(self):
        with self.assertRaises(DimensionMismatchError):
            estimate_variance_quantile(np.zeros((4, 2)), d=3)

    def test_one_dimensional_input(self):
        # steps 1, 2, 3 -> squared 1, 4, 9; alpha_1 = F(1) ~ 0.683, rank ceil(0.683 * 4) = 3 -> 9 / 2
        self.assertEqual(estimate_variance_quantile([0.0, 1.0, 3.0, 6.0]), 4.5)

    def test_translation_invariance(self):
        generator = np.random.default_rng(3)
        # integer-valued points so shifted differences are exact
        samples = generator.integers(-50, 50, size=(200, 5)).astype(np.float64)
        shifted = samples + np.array([1024.0, -2048.0, 7.0, 0.0, 3.0])
        self.assertEqual(estimate_variance_quantile(samples), estimate_variance_quantile(shifted))

    def test_scaling(self):
        generator = np.random.default_rng(4)
        samples = generator.normal(size=(300, 6))
        base = estimate_variance_quantile(samples)
        self.assertAlmostEqual(estimate_variance_quantile(3.0 * samples), 9.0 * base, delta=1e-12 * 9.0 * base * 10)

    def test_recovers_variance(self):
        generator = np.random.default_rng(5)
        d = 16
        samples = generator.normal(size=(20000, d)) * math.sqrt(2.5)
        estimate = estimate_variance_quantile(samples)
        self.assertLess(abs(estimate - 2.5) / 2.5, 0.5 / math.sqrt(d))

    def test_robust_to_small_corruption(self):
        generator = np.random.default_rng(6)
        d = 16
        clean = generator.normal(size=(20000, d))
        # 2% of the members come from a far away component
        outliers = generator.normal(size=(400, d)) + 100.0
        mixed = np.concatenate([clean, outliers])
        generator.shuffle(mixed, axis=0)
        estimate = estimate_variance_quantile(mixed)
        self.assertLess(abs(estimate - 1.0), 0.5 / math.sqrt(d))


class TestOneStepKmeans(unittest.TestCase):

    def setUp(self):
        self.truth = make_separated_spec(3, 8, 1.0, [0.5, 0.3, 0.2], "unit", SeededRng(42, 0))
        self.data = sample_dataset(self.truth, 20000, SeededRng(1, 1))

    def test_assignment_tie_goes_to_lowest_index(self):
        data = Dataset(samples=[[0.0], [2.0], [-2.0]])
        assignment = assign_clusters(data, [[-1.0], [1.0]])
        np.testing.assert_array_equal(assignment.cluster_of, [0, 1, 0])
        np.testing.assert_array_equal(assignment.sizes, [2, 1])

    def test_from_true_means(self):
        estimate = one_step_kmeans(self.data, self.truth.means)
        self.assertTrue(np.all(kmeans_bounds_hold(estimate, self.truth)))
        self.assertAlmostEqual(float(estimate.weights.sum()), 1.0, places=12)

    def test_from_displaced_means(self):
        init_means = displace_means(self.truth, 0.25, SeededRng(1, 3))
        estimate = one_step_kmeans(self.data, init_means)
        self.assertTrue(np.all(kmeans_bounds_hold(estimate, self.truth)))

    def test_weights_are_cluster_fractions(self):
        estimate = one_step_kmeans(self.data, self.truth.means)
        counts = np.bincount(self.data.labels, minlength=3)
        # clusters recover the labels exactly at this separation
        np.testing.assert_allclose(estimate.weights, counts / self.data.n)

    def test_empty_cluster(self):
        far_away = np.vstack([self.truth.means, [[1e9] * 8]])
        with self.assertRaises(EmptyComponentError) as ctx:
            one_step_kmeans(self.data, far_away)
        self.assertEqual(ctx.exception.component, 3)

    def test_singleton_cluster(self):
        data = Dataset(samples=[[0.0], [0.1], [10.0]])
        with self.assertRaises(ClusterTooSmallError):
            one_step_kmeans(data, [[0.0], [10.0]])


if __name__ == '__main__':
    unittest.main()
