"""
Tests for the single-image encoder and its agreement with the batched forward pass.
"""

import os
import sys
import unittest

import numpy as np

project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.append(project_root)

from src.models.encoders import EncoderParams, encode_image, encode_images

TANH_ONE = 0.7615941559557649


def _hand_encoder() -> EncoderParams:
    return EncoderParams(w1=np.array([[1.0, 1.0], [1.0, -1.0]]), b1=np.zeros(2),
                         w2=np.array([[2.0, 0.0], [0.0, 1.0]]), b2=np.array([1.0, 0.0]))


class TestEncodeImage(unittest.TestCase):

    def test_zero_weights_give_zero_embedding(self):
        params = EncoderParams(w1=np.zeros((5, 8)), b1=np.zeros(5), w2=np.zeros((3, 5)), b2=np.zeros(3))
        x = np.random.default_rng(0).normal(size=(2, 2, 2))
        np.testing.assert_array_equal(encode_image(params, x), np.zeros(3))

    def test_identical_inputs_identical_outputs(self):
        params = EncoderParams.initialize(8, 6, 3, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(2, 2, 2))
        np.testing.assert_array_equal(encode_image(params, x), encode_image(params, x.copy()))

    def test_pinned_values(self):
        # pre-activation [0, 1] -> hidden [0, tanh 1] -> [1, tanh 1]
        x = np.array([[[0.5, -0.5]]])
        np.testing.assert_allclose(encode_image(_hand_encoder(), x), [1.0, TANH_ONE], rtol=0, atol=1e-15)

    def test_same_seed_same_embedding(self):
        x = np.random.default_rng(7).normal(size=(2, 2, 2))
        first = encode_image(EncoderParams.initialize(8, 6, 3, np.random.default_rng(0)), x)
        second = encode_image(EncoderParams.initialize(8, 6, 3, np.random.default_rng(0)), x)
        np.testing.assert_array_equal(first, second)
        self.assertEqual(first.shape, (3,))

    def test_matches_batched_rows(self):
        params = EncoderParams.initialize(8, 6, 3, np.random.default_rng(0))
        images = np.random.default_rng(2).normal(size=(4, 2, 2, 2))
        batched, _ = encode_images(params, images)
        for i in range(4):
            np.testing.assert_allclose(encode_image(params, images[i]), batched[i], rtol=1e-12, atol=1e-12)

    def test_shape_errors(self):
        params = _hand_encoder()
        with self.assertRaisesRegex(ValueError, "shape mismatch"):
            encode_image(params, np.zeros((1, 2)))
        with self.assertRaisesRegex(ValueError, "shape mismatch"):
            encode_image(params, np.zeros((1, 1, 3)))


if __name__ == '__main__':
    unittest.main()
