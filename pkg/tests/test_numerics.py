"""
Tests for the shared tensor helpers in src.utils.numerics.
"""

import os
import sys
import unittest

import numpy as np

project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.append(project_root)

from src.utils.numerics import (
    batch_cross_entropy,
    central_differences,
    channel_stats,
    cosine_matrix,
    cosine_matrix_backward,
    cosine_similarity,
    grad_check,
    pooled_channel_stats,
    softmax_cross_entropy,
    softmax_cross_entropy_grad,
)


class TestChannelStats(unittest.TestCase):

    def test_single_channel_arithmetic(self):
        stats = channel_stats(np.array([[[1.0, 3.0], [5.0, 7.0]]]))
        np.testing.assert_allclose(stats.mean, [4.0])
        np.testing.assert_allclose(stats.var, [5.0])

    def test_constant_tensor(self):
        stats = channel_stats(np.full((3, 4, 5), 2.0))
        np.testing.assert_allclose(stats.mean, [2.0, 2.0, 2.0])
        np.testing.assert_allclose(stats.var, [0.0, 0.0, 0.0])

    def test_two_channels(self):
        stats = channel_stats(np.array([[[0.0, 0.0]], [[1.0, -1.0]]]))
        np.testing.assert_allclose(stats.mean, [0.0, 0.0])
        np.testing.assert_allclose(stats.var, [0.0, 1.0])

    def test_degenerate_input(self):
        with self.assertRaisesRegex(ValueError, "degenerate input"):
            channel_stats(np.zeros((1, 0, 2)))
        with self.assertRaisesRegex(ValueError, "degenerate input"):
            channel_stats(np.zeros((2, 2)))

    def test_pooled_over_images(self):
        images = np.array([[[[1.0]]], [[[3.0]]]])
        stats = pooled_channel_stats(images)
        np.testing.assert_allclose(stats.mean, [2.0])
        np.testing.assert_allclose(stats.var, [1.0])


class TestCosine(unittest.TestCase):

    def test_known_values(self):
        self.assertAlmostEqual(cosine_similarity([1, 0], [1, 0]), 1.0)
        self.assertAlmostEqual(cosine_similarity([1, 0], [0, 1]), 0.0)
        self.assertAlmostEqual(cosine_similarity([1, 1], [1, 0]), 0.7071, places=4)

    def test_zero_norm(self):
        with self.assertRaisesRegex(ValueError, "zero-norm vector"):
            cosine_similarity([0, 0], [1, 0])

    def test_matrix_is_clipped_and_matches_pairwise(self):
        rng = np.random.default_rng(0)
        a = rng.normal(size=(3, 5))
        b = rng.normal(size=(4, 5))
        sims = cosine_matrix(a, b)
        self.assertEqual(sims.shape, (3, 4))
        self.assertAlmostEqual(sims[1, 2], cosine_similarity(a[1], b[2]), places=12)
        self.assertTrue(np.all(np.abs(sims) <= 1.0))

    def test_matrix_backward(self):
        rng = np.random.default_rng(1)
        b_hat = rng.normal(size=(3, 4))
        b_hat /= np.linalg.norm(b_hat, axis=1, keepdims=True)
        weights = rng.normal(size=(2, 3))

        def f(vector):
            a = vector.reshape(2, 4)
            sims = cosine_matrix(a, b_hat)
            return float(np.sum(weights * sims)), cosine_matrix_backward(a, b_hat, weights).ravel()

        report = grad_check(f, rng.normal(size=8))
        self.assertTrue(report.passed(1e-4), report.max_rel_error)


class TestCrossEntropy(unittest.TestCase):

    def test_single_class(self):
        self.assertEqual(softmax_cross_entropy([3.7], 0), 0.0)

    def test_known_values(self):
        self.assertAlmostEqual(softmax_cross_entropy([1.0, 0.0], 0), np.log(1 + np.exp(-1)), places=10)
        self.assertAlmostEqual(softmax_cross_entropy([1.0, 0.0], 0), 0.3133, places=4)
        self.assertAlmostEqual(softmax_cross_entropy([0.0, 0.0, 0.0], 2), np.log(3), places=10)

    def test_large_logits_are_stable(self):
        loss = softmax_cross_entropy([1000.0, 0.0], 0)
        self.assertTrue(np.isfinite(loss))
        self.assertAlmostEqual(loss, 0.0, places=10)

    def test_out_of_range_target(self):
        with self.assertRaises(ValueError):
            softmax_cross_entropy([1.0, 2.0], 2)
        with self.assertRaises(ValueError):
            softmax_cross_entropy([1.0, 2.0], -1)

    def test_gradient(self):
        rng = np.random.default_rng(2)
        f = lambda z: softmax_cross_entropy_grad(z, 3)  # noqa: E731
        report = grad_check(f, rng.normal(size=5))
        self.assertTrue(report.passed(1e-4), report.max_rel_error)

    def test_batch_mean(self):
        logits = np.array([[1.0, 0.0], [0.0, 0.0]])
        loss, grad = batch_cross_entropy(logits, [0, 1])
        self.assertAlmostEqual(loss, (np.log(1 + np.exp(-1)) + np.log(2)) / 2, places=10)
        self.assertEqual(grad.shape, (2, 2))


class TestGradCheck(unittest.TestCase):

    def test_detects_wrong_gradient(self):
        f = lambda x: (float(np.sum(x ** 2)), 3.0 * x)  # noqa: E731
        report = grad_check(f, np.array([0.5, -1.0, 2.0]))
        self.assertFalse(report.passed(1e-4))

    def test_index_subset(self):
        f = lambda x: (float(np.sum(x ** 3)), 3.0 * x ** 2)  # noqa: E731
        report = grad_check(f, np.array([0.5, -1.0, 2.0]), indices=[0, 2])
        self.assertEqual(report.per_parameter_errors.shape, (2,))
        self.assertTrue(report.passed(1e-4))

    def test_absolute_check_catches_a_missing_partial(self):
        f = lambda x: (float(np.sum(x ** 2)), np.array([2.0 * x[0], 0.0, 2.0 * x[2]]))  # noqa: E731
        point = np.array([0.5, -1.0, 2.0])
        relative_only = grad_check(f, point, indices=[0, 2])
        self.assertTrue(relative_only.passed(1e-4))
        report = grad_check(f, point, indices=[0, 2], abs_indices=[1], abs_tolerance=1e-7)
        self.assertAlmostEqual(report.max_abs_error, 2.0, places=6)
        self.assertFalse(report.passed(1e-4))

    def test_central_differences(self):
        f = lambda x: (float(np.sum(x ** 2)), 2.0 * x)  # noqa: E731
        np.testing.assert_allclose(central_differences(f, np.array([1.0, -3.0])), [2.0, -6.0], atol=1e-8)

    def test_non_finite_value(self):
        f = lambda x: (float('nan'), np.zeros_like(x))  # noqa: E731
        with self.assertRaises(FloatingPointError):
            grad_check(f, np.zeros(2))


if __name__ == '__main__':
    unittest.main()
