"""
Ablation harness: named grids of config overrides, each cell run over several
seeds on a bounded worker pool, reported as seed mean and std.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from src.models.experiment import ExperimentConfig
from src.services.experiment_runner import ExperimentRunner

logger = logging.getLogger(__name__)

GRIDS: Dict[str, Dict[str, Dict[str, Any]]] = {
    'components': {
        'baseline': {'csa.enabled': False, 'gsd.enabled': False},
        'csa_only': {'csa.enabled': True, 'gsd.enabled': False},
        'gsd_only': {'csa.enabled': False, 'gsd.enabled': True},
        'full': {'csa.enabled': True, 'gsd.enabled': True},
    },
    'anchoring': {
        'static': {'csa.anchoring': 'static'},
        'dynamic': {'csa.anchoring': 'dynamic'},
    },
    'scope': {
        'global': {'gsd.scope': 'global'},
        'local': {'gsd.scope': 'local'},
        'random_stat': {'gsd.scope': 'random_stat'},
    },
    'metadata': {
        'clean': {'gsd.metadata': 'clean'},
        'corrupt': {'gsd.metadata': 'corrupt', 'gsd.corruption_fraction': 0.3},
        'pseudo_group': {'gsd.metadata': 'pseudo_group'},
    },
    'tokens': {f'L={n}': {'csa.num_tokens': n} for n in (1, 4, 8, 16)},
    'lambda_c3': {f'lambda_c3={v}': {'csa.lambda_c3': v} for v in (0.0, 0.1, 0.2, 0.5)},
}

METRIC_COLUMNS = ['mAP', 'rank1', 'rank5', 'rank10', 'same_identity_mean', 'different_identity_mean',
                  'csa_camera_variance']

MIN_SEEDS = 3


def grid_cells(grid: str) -> Dict[str, Dict[str, Any]]:
    if grid not in GRIDS:
        raise ValueError(f"unknown grid '{grid}', expected one of {sorted(GRIDS)}")
    return GRIDS[grid]


def run_cell(config: ExperimentConfig, cell: str, overrides: Dict[str, Any], seed: int) -> Dict[str, Any]:
    """One (cell, seed) run, reduced to a flat result row"""
    cell_config = config.with_overrides(overrides)
    result = ExperimentRunner(cell_config, workers=1).run(seed)
    row: Dict[str, Any] = {'cell': cell, 'seed': seed}
    row.update({k: result.summary.get(k, np.nan) for k in ('mAP', 'rank1', 'rank5', 'rank10')})
    margins = result.federation.final_margins
    row['same_identity_mean'] = margins.same_identity_mean if margins is not None else np.nan
    row['different_identity_mean'] = margins.different_identity_mean if margins is not None else np.nan
    row['csa_camera_variance'] = result.camera_variance
    return row


@dataclass
class AblationTable:
    grid: str
    runs: pd.DataFrame
    summary: pd.DataFrame

    def cell_mean(self, cell: str, metric: str = 'mAP') -> float:
        return float(self.summary.loc[cell, f'{metric}_mean'])

    def to_text(self) -> str:
        """Aligned-column table of seed means and stds"""
        columns = ['mAP_mean', 'mAP_std', 'rank1_mean', 'rank1_std', 'num_seeds']
        return self.summary[columns].to_string(float_format=lambda v: f'{v:.4f}') + '\n'


class AblationHarness:
    """Runs every cell of a grid over the given seeds"""

    def __init__(self, config: ExperimentConfig, workers: int = 1):
        self.config = config
        self.workers = max(1, workers)
        self.logger = logging.getLogger(__name__)

    def run(self, grid: str, seeds: Sequence[int]) -> AblationTable:
        cells = grid_cells(grid)
        seeds = list(seeds)
        if len(seeds) < MIN_SEEDS:
            raise ValueError(f"ablation needs at least {MIN_SEEDS} seeds, got {len(seeds)}")
        jobs = [(cell, overrides, seed) for cell, overrides in cells.items() for seed in seeds]
        self.logger.info(f"Ablation '{grid}': {len(cells)} cells x {len(seeds)} seeds = {len(jobs)} runs "
                         f"on {self.workers} workers")

        rows: List[Dict[str, Any]] = Parallel(n_jobs=self.workers)(
            delayed(run_cell)(self.config, cell, overrides, seed) for cell, overrides, seed in jobs)
        runs = pd.DataFrame(rows, columns=['cell', 'seed'] + METRIC_COLUMNS)
        return AblationTable(grid=grid, runs=runs, summary=summarize(runs, list(cells)))


def summarize(runs: pd.DataFrame, order: Sequence[str]) -> pd.DataFrame:
    """Seed mean and sample std per cell, in grid order"""
    grouped = runs.groupby('cell')[METRIC_COLUMNS]
    mean = grouped.mean().add_suffix('_mean')
    std = grouped.std(ddof=1).add_suffix('_std')
    summary = mean.join(std)
    summary['num_seeds'] = runs.groupby('cell')['seed'].count()
    summary = summary.reindex(list(order))
    interleaved = [f'{m}_{s}' for m in METRIC_COLUMNS for s in ('mean', 'std')] + ['num_seeds']
    return summary[interleaved]
