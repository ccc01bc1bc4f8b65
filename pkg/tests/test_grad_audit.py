"""
Finite-difference audit of the closed-form gradients.
"""

import os
import sys
import unittest

import numpy as np

project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.append(project_root)

from src.services.grad_audit import (
    CASES,
    TOLERANCE,
    check,
    informative_coordinates,
    run_audit,
)


class TestGradAudit(unittest.TestCase):

    def test_every_case_passes_on_ten_configurations(self):
        cases = run_audit(seed=0, configurations=10)
        self.assertEqual(len(cases), 10 * len(CASES))
        failures = [(c.name, c.seed, c.report.max_rel_error, c.report.max_abs_error)
                    for c in cases if not c.passed]
        self.assertEqual(failures, [])

    def test_every_loss_is_covered(self):
        for name in ('loss_i2t', 'loss_t2i', 'loss_c3', 'csa_tokens', 'loss_id', 'loss_tri_batch_hard',
                     'loss_tri_batch_all', 'loss_align', 'local_objective'):
            self.assertIn(name, CASES)

    def test_informative_coordinates_cover_every_coordinate(self):
        weights = np.zeros(10)
        weights[[3, 7]] = [1.0, -2.0]
        f = lambda x: (float(weights @ x), weights.copy())  # noqa: E731
        signal, quiet = informative_coordinates(f, np.zeros(10))
        np.testing.assert_array_equal(signal, [3, 7])
        np.testing.assert_array_equal(np.sort(np.concatenate([signal, quiet])), np.arange(10))

    def test_zero_analytic_partial_is_still_selected(self):
        weights = np.array([1.0, 2.0, 3.0])
        f = lambda x: (float(weights @ x), np.array([1.0, 0.0, 3.0]))  # noqa: E731
        signal, quiet = informative_coordinates(f, np.zeros(3))
        np.testing.assert_array_equal(signal, [0, 1, 2])
        self.assertEqual(quiet.size, 0)

    def test_detects_a_wrong_gradient(self):
        build = CASES['loss_id']
        f, point = build(np.random.default_rng(0))
        broken = lambda x: (f(x)[0], 2.0 * f(x)[1])  # noqa: E731
        self.assertTrue(check(f, point).passed(TOLERANCE))
        self.assertFalse(check(broken, point).passed(TOLERANCE))

    def test_detects_a_dropped_gradient_column(self):
        f, point = CASES['loss_align'](np.random.default_rng(0))

        def dropped(x):
            value, grad = f(x)
            grad = grad.reshape(6, 4).copy()
            grad[:, 0] = 0.0
            return value, grad.ravel()

        self.assertTrue(check(f, point).passed(TOLERANCE))
        self.assertFalse(check(dropped, point).passed(TOLERANCE))


if __name__ == '__main__':
    unittest.main()
