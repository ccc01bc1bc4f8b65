"""
Tests for the pilot calibration ladder and the calibrate verb.
"""

import io
import os
import sys
import unittest
from contextlib import redirect_stdout
from unittest.mock import patch

import pandas as pd
import yaml

project_root = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.append(project_root)

from src.main import EXIT_OK, EXIT_RUNTIME, main, nest_overrides
from src.mock.models.mock_experiment import create_mock_config_dict, create_mock_experiment_config
from src.mock.utils.mock_test_helpers import reset_config, temporary_directory, write_config_file
from src.models.experiment import ExperimentConfig
from src.services.calibration import (
    DIFFICULTY_LADDER,
    CalibrationReport,
    CalibrationService,
    choose_rung,
)


def _rungs(baseline, full):
    frame = pd.DataFrame({'rung': range(len(baseline)), 'baseline': baseline, 'full': full})
    frame['margin'] = frame['full'] - frame['baseline']
    return frame


class TestChooseRung(unittest.TestCase):

    def test_first_qualifying_rung(self):
        rungs = _rungs([1.0, 0.85, 0.7], [1.0, 0.93, 0.8])
        self.assertEqual(choose_rung(rungs, ceiling=0.9, margin=0.05), 1)

    def test_saturated_baseline_is_rejected(self):
        rungs = _rungs([0.95, 0.95], [1.0, 1.0])
        self.assertIsNone(choose_rung(rungs, ceiling=0.9, margin=0.05))

    def test_small_margin_is_rejected(self):
        rungs = _rungs([0.6, 0.5], [0.62, 0.52])
        self.assertIsNone(choose_rung(rungs, ceiling=0.9, margin=0.05))


class TestLadder(unittest.TestCase):

    def test_every_rung_is_a_config_field(self):
        config = ExperimentConfig()
        for rung in DIFFICULTY_LADDER:
            config.with_overrides(rung)

    def test_defaults_sit_on_the_ladder(self):
        dataset = ExperimentConfig().dataset
        current = {'dataset.noise_sigma': dataset.noise_sigma, 'dataset.identity_dim': dataset.identity_dim,
                   'dataset.target_style_gap': dataset.target_style_gap}
        self.assertIn(current, DIFFICULTY_LADDER)


class TestCalibrationService(unittest.TestCase):

    def test_pilot_on_tiny_federation(self):
        ladder = [{'dataset.noise_sigma': 0.0}, {'dataset.noise_sigma': 0.5}]
        service = CalibrationService(create_mock_experiment_config(federation__rounds=1), ladder=ladder,
                                     ceiling=1.01, margin=-1.0)
        report = service.run([0])
        self.assertEqual(list(report.rungs.columns), ['rung', 'baseline', 'full', 'margin'])
        self.assertEqual(report.rungs['rung'].tolist(), [0, 1])
        row = report.rungs.iloc[1]
        self.assertAlmostEqual(row['margin'], row['full'] - row['baseline'])
        self.assertEqual(report.chosen, 0)
        self.assertEqual(report.overrides, {'dataset.noise_sigma': 0.0})
        self.assertIn('chosen rung 0', report.to_text())

    def test_no_seeds(self):
        with self.assertRaisesRegex(ValueError, "at least one pilot seed"):
            CalibrationService(create_mock_experiment_config()).run([])

    def test_empty_ladder(self):
        with self.assertRaisesRegex(ValueError, "empty difficulty ladder"):
            CalibrationService(create_mock_experiment_config(), ladder=[]).run([0])


class TestCalibrateVerb(unittest.TestCase):

    def setUp(self):
        self._tmp = temporary_directory()
        self.tmp = self._tmp.__enter__()
        self.config_path = write_config_file(self.tmp, create_mock_config_dict(federation={'rounds': 1}))
        self.out_dir = os.path.join(self.tmp, 'calibration')

    def tearDown(self):
        self._tmp.__exit__(None, None, None)
        reset_config()

    def _calibrate(self, report):
        out = io.StringIO()
        with patch('src.main.CalibrationService.run', return_value=report), redirect_stdout(out):
            code = main(['--log-level', 'ERROR', 'calibrate', '--config', self.config_path,
                         '--seeds', '0', '--out', self.out_dir])
        return code, out.getvalue()

    def test_chosen_rung_is_written_as_yaml(self):
        ladder = [{'dataset.noise_sigma': 1.0, 'dataset.target_style_gap': 2.0}]
        report = CalibrationReport(rungs=_rungs([0.7], [0.8]), chosen=0, ladder=ladder)
        code, stdout = self._calibrate(report)
        self.assertEqual(code, EXIT_OK)
        self.assertIn('chosen rung 0', stdout)
        with open(os.path.join(self.out_dir, 'calibration.yaml')) as f:
            self.assertEqual(yaml.safe_load(f), {'dataset': {'noise_sigma': 1.0, 'target_style_gap': 2.0}})
        self.assertTrue(os.path.exists(os.path.join(self.out_dir, 'calibration.csv')))

    def test_no_accepted_rung_fails(self):
        report = CalibrationReport(rungs=_rungs([1.0], [1.0]), chosen=None, ladder=[{}])
        code, stdout = self._calibrate(report)
        self.assertEqual(code, EXIT_RUNTIME)
        self.assertIn('no rung accepted', stdout)
        self.assertFalse(os.path.exists(os.path.join(self.out_dir, 'calibration.yaml')))

    def test_nest_overrides(self):
        self.assertEqual(nest_overrides({'csa.lambda_c3': 0.1, 'seed': 3}),
                         {'csa': {'lambda_c3': 0.1}, 'seed': 3})


if __name__ == '__main__':
    unittest.main()
