"""
Tests for the client-side losses, the coupled local objective, PK sampling and the optimizer.
"""

import os
import sys
import unittest

import numpy as np

project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.append(project_root)

from src.mock.models.mock_experiment import create_mock_encoder, create_mock_head
from src.models.experiment import LocalObjectiveConfig
from src.models.local_objective import (
    AnchorSet,
    MomentumSGD,
    PKSampler,
    local_objective,
    loss_align,
    loss_id,
    loss_tri,
)
from src.services.grad_audit import case_local_objective, check
from src.utils.numerics import l2_normalize


class TestIdentityLoss(unittest.TestCase):

    def test_single_class(self):
        self.assertEqual(loss_id([[2.5]], [0]), 0.0)

    def test_uniform(self):
        self.assertAlmostEqual(loss_id(np.zeros((3, 20)), [0, 7, 19]), np.log(20), places=10)

    def test_known_value(self):
        self.assertAlmostEqual(loss_id([[1.0, 0.0]], [0]), 0.3133, places=4)

    def test_target_outside_head(self):
        with self.assertRaisesRegex(ValueError, "outside"):
            loss_id(np.zeros((1, 2)), [2])


class TestTripletLoss(unittest.TestCase):

    def test_satisfied_margin(self):
        embeddings = np.array([[0.0], [0.2], [0.9]])
        with self.assertLogs('src.models.local_objective', level='WARNING'):
            loss = loss_tri(embeddings, [0, 0, 1], margin=0.3)
        self.assertEqual(loss, 0.0)

    def test_equal_distances_give_margin(self):
        embeddings = np.array([[0.0], [1.0], [-1.0]])
        with self.assertLogs('src.models.local_objective', level='WARNING'):
            loss = loss_tri(embeddings, [0, 0, 1], margin=0.3)
        # anchor 0 contributes the bare margin; anchor 1 is satisfied
        self.assertAlmostEqual(loss, 0.3 / 2, places=12)

    def test_duplicates_far_apart(self):
        embeddings = np.array([[0.0, 0.0], [0.0, 0.0], [10.0, 0.0], [10.0, 0.0]])
        self.assertEqual(loss_tri(embeddings, [0, 0, 1, 1], margin=0.3), 0.0)
        self.assertEqual(loss_tri(embeddings, [0, 0, 1, 1], margin=0.3, mining='batch_all'), 0.0)

    def test_no_valid_anchor(self):
        with self.assertLogs('src.models.local_objective', level='WARNING'):
            with self.assertRaisesRegex(ValueError, "no valid triplet"):
                loss_tri(np.zeros((3, 2)), [1, 1, 1], margin=0.3)

    def test_batch_all_averages_every_triplet(self):
        embeddings = np.array([[0.0], [1.0], [-1.0], [3.0]])
        loss = loss_tri(embeddings, [0, 0, 1, 1], margin=0.5, mining='batch_all')
        terms = []
        for a, p in [(0, 1), (1, 0), (2, 3), (3, 2)]:
            for n in [i for i in range(4) if [0, 0, 1, 1][i] != [0, 0, 1, 1][a]]:
                d_ap = abs(embeddings[a, 0] - embeddings[p, 0])
                d_an = abs(embeddings[a, 0] - embeddings[n, 0])
                terms.append(max(d_ap - d_an + 0.5, 0.0))
        self.assertAlmostEqual(loss, float(np.mean(terms)), places=12)

    def test_unknown_mining(self):
        with self.assertRaises(ValueError):
            loss_tri(np.eye(4), [0, 0, 1, 1], margin=0.3, mining='semi_hard')


class TestAlignmentLoss(unittest.TestCase):

    def test_single_prototype(self):
        self.assertEqual(loss_align([[0.3, 0.4]], np.array([[1.0, 0.0]]), [0], 0.07), 0.0)

    def test_confident_alignment(self):
        prototypes = np.eye(20)
        expected = -np.log(np.exp(1 / 0.07) / (np.exp(1 / 0.07) + 19))
        loss = loss_align(prototypes[:1] * 2.0, prototypes, [0], 0.07)
        self.assertAlmostEqual(loss, expected, delta=1e-12)
        self.assertAlmostEqual(loss, 1.2e-5, delta=0.1e-5)

    def test_uniform(self):
        prototypes = np.hstack([np.eye(20), np.zeros((20, 1))])
        embedding = np.zeros((1, 21))
        embedding[0, 20] = 1.0
        self.assertAlmostEqual(loss_align(embedding, prototypes, [4], 0.07), np.log(20), places=10)

    def test_missing_prototype(self):
        with self.assertRaisesRegex(ValueError, "missing prototype"):
            loss_align([[1.0, 0.0]], np.eye(2), [2], 0.07)
        anchors = AnchorSet(identities=[3, 4], matrix=np.eye(2))
        with self.assertRaisesRegex(ValueError, "missing prototype for identity 5"):
            anchors.rows([3, 5])


class TestLocalObjective(unittest.TestCase):

    def setUp(self):
        rng = np.random.default_rng(0)
        self.images = rng.normal(size=(4, 2, 2, 2))
        self.stylized = rng.normal(size=(4, 2, 2, 2))
        self.labels = np.array([7, 7, 9, 9])
        self.encoder = create_mock_encoder()
        self.head = create_mock_head([7, 9])
        prototypes, _ = l2_normalize(rng.normal(size=(2, 4)))
        self.anchors = AnchorSet(identities=[7, 9], matrix=prototypes)

    def _config(self, **overrides) -> LocalObjectiveConfig:
        return LocalObjectiveConfig(**overrides)

    def test_identity_style_view_doubles_loss(self):
        single = local_objective(self.encoder, self.head, self.images, None, self.labels, None,
                                 self._config(lambda_align=0.0, use_stylized_view=False))
        double = local_objective(self.encoder, self.head, self.images, self.images.copy(), self.labels, None,
                                 self._config(lambda_align=0.0))
        self.assertAlmostEqual(double.loss, 2 * single.loss, places=12)

    def test_view_swap_invariance(self):
        config = self._config()
        a = local_objective(self.encoder, self.head, self.images, self.stylized, self.labels, self.anchors, config)
        b = local_objective(self.encoder, self.head, self.stylized, self.images, self.labels, self.anchors, config)
        self.assertAlmostEqual(a.loss, b.loss, places=12)

    def test_total_equals_weighted_parts(self):
        config = self._config(lambda_align=0.5)
        result = local_objective(self.encoder, self.head, self.images, self.stylized, self.labels,
                                 self.anchors, config)
        expected = sum(v if not k.startswith('align') else 0.5 * v for k, v in result.parts.items())
        self.assertAlmostEqual(result.loss, expected, delta=1e-9)
        self.assertEqual(sorted(result.parts), ['align_orig', 'align_style', 'id_orig', 'id_style',
                                                'tri_orig', 'tri_style'])
        self.assertTrue(all(v >= 0 for v in result.parts.values()))

    def test_prototypes_are_not_touched(self):
        before = self.anchors.matrix.copy()
        local_objective(self.encoder, self.head, self.images, self.stylized, self.labels, self.anchors,
                        self._config())
        np.testing.assert_array_equal(before, self.anchors.matrix)

    def test_full_gradient(self):
        for seed in range(3):
            f, point = case_local_objective(np.random.default_rng(seed))
            report = check(f, point)
            self.assertTrue(report.passed(1e-4), report.max_rel_error)


class TestSampling(unittest.TestCase):

    def test_pk_batches(self):
        labels = np.repeat(np.arange(5), 3)
        sampler = PKSampler(labels, num_identities=2, num_instances=4)
        batch = sampler.sample(np.random.default_rng(0))
        self.assertEqual(batch.shape, (8,))
        picked = labels[batch]
        self.assertEqual(len(set(picked.tolist())), 2)
        for y in set(picked.tolist()):
            self.assertEqual(int(np.sum(picked == y)), 4)
        self.assertEqual(sampler.batches_per_epoch(), 1)

    def test_same_rng_same_batches(self):
        labels = np.repeat(np.arange(4), 4)
        sampler = PKSampler(labels, 2, 2)
        first = list(sampler.epoch(np.random.default_rng(3)))
        second = list(sampler.epoch(np.random.default_rng(3)))
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a, b)


class TestMomentumSGD(unittest.TestCase):

    def test_momentum_and_weight_decay(self):
        params = {'w': np.array([1.0])}
        optimizer = MomentumSGD(momentum=0.9, weight_decay=0.1)
        optimizer.step(params, {'w': np.array([1.0])}, lr=0.5)
        # grad 1 + 0.1 * 1 = 1.1
        np.testing.assert_allclose(params['w'], [1.0 - 0.55])
        optimizer.step(params, {'w': np.array([0.0])}, lr=0.5)
        buf = 0.9 * 1.1 + 0.1 * 0.45
        np.testing.assert_allclose(params['w'], [0.45 - 0.5 * buf])


if __name__ == '__main__':
    unittest.main()
