"""
Tests for the binary artifact formats and the run directory DAO.
"""

import json
import os
import sys
import unittest

import numpy as np
import pandas as pd

project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.append(project_root)

from src.mock.models.mock_experiment import (
    create_mock_client_samples,
    create_mock_encoder,
    create_mock_experiment_config,
    create_mock_head,
)
from src.mock.utils.mock_test_helpers import temporary_directory
from src.models.encoders import PromptTokens, TextEncoderSurrogate, cache_prototypes
from src.services.style_bank import StyleBankService, extract_templates
from src.services.synthdata import generate_federation
from src.utils.artifact_dao import (
    ArtifactDAO,
    bank_to_dict,
    decode_bank,
    decode_checkpoint,
    decode_prototypes,
    encode_bank,
    encode_checkpoint,
    encode_prototypes,
    sha256_file,
)


def _bank():
    uploads = []
    for k in range(2):
        samples = create_mock_client_samples(num_cameras=3, client=k, seed=k)
        uploads.append(extract_templates(samples, [s.camera for s in samples], client=k))
    return StyleBankService().build_bank(uploads)


class TestBinaryFormats(unittest.TestCase):

    def test_bank(self):
        bank = _bank()
        blob = encode_bank(bank)
        self.assertEqual(blob[:4], b'GCSB')
        decoded = decode_bank(blob)
        self.assertEqual([t.sort_key for t in decoded.templates], [t.sort_key for t in bank.templates])
        np.testing.assert_array_equal(decoded.mean_matrix(), bank.mean_matrix())
        np.testing.assert_array_equal(decoded.var_matrix(), bank.var_matrix())
        self.assertEqual(encode_bank(decoded), blob)

    def test_prototypes(self):
        tokens = PromptTokens.initialize([4, 9, 2], 3, 5, np.random.default_rng(0))
        prototypes = cache_prototypes(TextEncoderSurrogate(5, 4, seed=1), tokens)
        decoded = decode_prototypes(encode_prototypes(prototypes))
        self.assertEqual([p.identity for p in decoded], [4, 9, 2])
        for p, q in zip(prototypes, decoded):
            np.testing.assert_array_equal(p.vector, q.vector)
        with self.assertRaises(ValueError):
            decoded[0].vector[0] = 1.0

    def test_checkpoint(self):
        arrays = {'encoder.w1': np.arange(6, dtype=float).reshape(2, 3), 'head0.classes': np.array([3, 1]),
                  'scalar': np.array(2.5)}
        decoded, seed = decode_checkpoint(encode_checkpoint(arrays, seed=11))
        self.assertEqual(seed, 11)
        self.assertEqual(sorted(decoded), sorted(arrays))
        for name, arr in arrays.items():
            np.testing.assert_array_equal(decoded[name], arr)
        self.assertEqual(decoded['head0.classes'].dtype, np.dtype('<i8'))

    def test_bad_magic(self):
        blob = encode_bank(_bank())
        with self.assertRaisesRegex(ValueError, "bad magic"):
            decode_prototypes(blob)
        with self.assertRaisesRegex(ValueError, "bad magic"):
            decode_bank(b'XXXX' + blob[4:])

    def test_unsupported_version(self):
        blob = bytearray(encode_bank(_bank()))
        blob[4] = 9
        with self.assertRaisesRegex(ValueError, "unsupported format version 9"):
            decode_bank(bytes(blob))


class TestArtifactDAO(unittest.TestCase):

    def test_json_is_deterministic(self):
        with temporary_directory() as tmp:
            dao = ArtifactDAO(tmp)
            dao.write_json('a.json', {'b': np.float64(1.5), 'a': np.arange(3)})
            first = dao.checksums()['a.json']
            dao.write_json('a.json', {'a': [0, 1, 2], 'b': 1.5})
            self.assertEqual(dao.checksums()['a.json'], first)
            self.assertEqual(dao.read_json('a.json'), {'a': [0, 1, 2], 'b': 1.5})

    def test_json_rejects_unknown_types(self):
        with temporary_directory() as tmp:
            with self.assertRaises(TypeError):
                ArtifactDAO(tmp).write_json('bad.json', {'x': object()})

    def test_bank_files(self):
        bank = _bank()
        with temporary_directory() as tmp:
            dao = ArtifactDAO(tmp)
            dao.save_bank(bank)
            loaded = dao.load_bank()
            with open(dao.path('bank.json')) as f:
                twin = json.load(f)
        self.assertEqual(len(loaded), len(bank))
        self.assertEqual(twin, bank_to_dict(bank))
        self.assertEqual(twin['num_channels'], 2)

    def test_checkpoint_files(self):
        encoder = create_mock_encoder()
        heads = {0: create_mock_head([3, 5]), 1: create_mock_head([8], seed=1)}
        with temporary_directory() as tmp:
            dao = ArtifactDAO(tmp)
            dao.save_checkpoint(encoder, heads, seed=4)
            loaded_encoder, loaded_heads, seed = dao.load_checkpoint()
        self.assertEqual(seed, 4)
        for name, arr in encoder.arrays().items():
            np.testing.assert_array_equal(loaded_encoder.arrays()[name], arr)
        self.assertEqual(loaded_heads[0].classes, [3, 5])
        np.testing.assert_array_equal(loaded_heads[1].weight, heads[1].weight)

    def test_federation_export(self):
        config = create_mock_experiment_config()
        dataset = generate_federation(config, 0)
        with temporary_directory() as tmp:
            dao = ArtifactDAO(tmp)
            dao.save_federation(dataset)
            loaded = dao.load_federation()
            labels = pd.read_csv(dao.path('data/client0_labels.csv'))
        self.assertEqual(loaded.num_clients, dataset.num_clients)
        self.assertEqual(loaded.target.name, dataset.target.name)
        self.assertEqual(list(labels.columns), ['identity', 'camera', 'client', 'domain'])
        for a, b in zip(dataset.clients[1], loaded.clients[1]):
            np.testing.assert_array_equal(a.image, b.image)
            self.assertEqual((a.identity, a.camera), (b.identity, b.camera))
        self.assertEqual(len(loaded.target.query), len(dataset.target.query))

    def test_checksums_cover_written_files(self):
        with temporary_directory() as tmp:
            dao = ArtifactDAO(tmp)
            dao.write_text('notes.txt', 'hello')
            dao.write_frame('rounds.csv', pd.DataFrame({'round': [1], 'value': [0.5]}))
            sums = dao.checksums()
            self.assertEqual(sorted(sums), ['notes.txt', 'rounds.csv'])
            self.assertEqual(sums['notes.txt'], sha256_file(dao.path('notes.txt')))
            self.assertEqual(sums['notes.txt'],
                             '2cf24dba5fb0a30e26e83b2ac5b9e29e1b161e5c1fa7425e73043362938b9824')


if __name__ == '__main__':
    unittest.main()
