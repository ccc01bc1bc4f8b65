"""
Tests for the command-line verbs and their exit codes.
"""

import io
import json
import os
import sys
import unittest
from contextlib import redirect_stdout
from unittest.mock import patch

project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.append(project_root)

from src.main import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from src.mock.models.mock_experiment import create_mock_config_dict
from src.mock.utils.mock_test_helpers import reset_config, temporary_directory, write_config_file
from src.services.experiment_runner import PhaseError


def _main(argv):
    out = io.StringIO()
    with redirect_stdout(out):
        code = main(['--log-level', 'WARNING'] + argv)
    return code, out.getvalue()


class TestCli(unittest.TestCase):

    def setUp(self):
        self._tmp = temporary_directory()
        self.tmp = self._tmp.__enter__()
        self.config_path = write_config_file(self.tmp, create_mock_config_dict(federation={'rounds': 1}))

    def tearDown(self):
        self._tmp.__exit__(None, None, None)
        reset_config()

    def test_dry_run_writes_nothing(self):
        out_dir = os.path.join(self.tmp, 'never')
        code, stdout = _main(['run', '--config', self.config_path, '--dry-run', '--out', out_dir, '--seed', '3'])
        self.assertEqual(code, EXIT_OK)
        plan = json.loads(stdout)
        self.assertEqual(plan['sources'], [0, 1])
        self.assertEqual(plan['target'], 2)
        self.assertEqual(plan['config']['seed'], 3)
        self.assertFalse(os.path.exists(out_dir))

    def test_invalid_config(self):
        path = write_config_file(self.tmp, text="csa:\n  temperature: -1.0\n", name='bad.yaml')
        code, _ = _main(['run', '--config', path])
        self.assertEqual(code, EXIT_CONFIG)

    def test_unknown_grid(self):
        code, _ = _main(['ablate', '--config', self.config_path, '--grid', 'everything'])
        self.assertEqual(code, EXIT_CONFIG)

    def test_too_few_seeds(self):
        code, _ = _main(['ablate', '--config', self.config_path, '--grid', 'scope', '--seeds', '0',
                         '--out', os.path.join(self.tmp, 'ablation')])
        self.assertEqual(code, EXIT_CONFIG)

    def test_run_then_inspect_bank(self):
        out_dir = os.path.join(self.tmp, 'run')
        code, _ = _main(['run', '--config', self.config_path, '--out', out_dir])
        self.assertEqual(code, EXIT_OK)
        for name in ('metrics.json', 'rounds.csv', 'bank.bin', 'bank.json', 'checkpoint.bin', 'manifest.json',
                     'prototypes_client0.bin'):
            self.assertTrue(os.path.exists(os.path.join(out_dir, name)), name)

        code, stdout = _main(['inspect-bank', os.path.join(out_dir, 'bank.bin')])
        self.assertEqual(code, EXIT_OK)
        self.assertIn('4 templates, 2 channels', stdout)

    def test_inspect_bad_bank(self):
        path = os.path.join(self.tmp, 'bank.bin')
        with open(path, 'wb') as f:
            f.write(b'NOPE' + bytes(12))
        code, _ = _main(['inspect-bank', path])
        self.assertEqual(code, EXIT_RUNTIME)

    def test_runtime_failure(self):
        with patch('src.main.ExperimentRunner.run', side_effect=PhaseError('federation', 'diverged')):
            code, _ = _main(['run', '--config', self.config_path, '--out', os.path.join(self.tmp, 'x')])
        self.assertEqual(code, EXIT_RUNTIME)

    def test_ablation_failure(self):
        with patch('src.main.AblationHarness.run', side_effect=RuntimeError('worker lost')):
            code, _ = _main(['ablate', '--config', self.config_path, '--grid', 'scope',
                             '--out', os.path.join(self.tmp, 'abl')])
        self.assertEqual(code, EXIT_RUNTIME)

    def test_gen_data(self):
        out_dir = os.path.join(self.tmp, 'data_export')
        code, _ = _main(['gen-data', '--config', self.config_path, '--out', out_dir])
        self.assertEqual(code, EXIT_OK)
        with open(os.path.join(out_dir, 'data', 'dataset.json')) as f:
            index = json.load(f)
        self.assertEqual(len(index['clients']), 2)
        self.assertEqual(index['target']['name'], 'target_d2')

    def test_grad_check(self):
        code, stdout = _main(['grad-check', '--configurations', '1'])
        self.assertEqual(code, EXIT_OK)
        self.assertIn('local_objective', stdout)


if __name__ == '__main__':
    unittest.main()
