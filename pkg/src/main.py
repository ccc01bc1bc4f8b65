"""Command-line entry point: python -m src.main <verb> [options]"""

import argparse
import json
import logging
import os
import sys
from typing import List, Optional, Tuple

import pandas as pd
import yaml

from src.models.experiment import ExperimentConfig
from src.services.ablation import GRIDS, AblationHarness
from src.services.calibration import PILOT_SEEDS, CalibrationService
from src.services.experiment_runner import ExperimentRunner, PhaseError
from src.services.grad_audit import TOLERANCE, run_audit
from src.services.synthdata import source_domains, generate_federation
from src.utils.artifact_dao import ArtifactDAO, bank_to_dict, decode_bank
from src.utils.config import Config
from src.utils.validation import ExperimentConfigValidator

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2

logger = logging.getLogger(__name__)


def load_experiment_config(path: str, seed: Optional[int] = None) -> Tuple[Optional[ExperimentConfig], List[str]]:
    """Load, validate and resolve a config file; returns (config, line-anchored errors)"""
    if not os.path.exists(path):
        return None, [f"line ?: config file not found: {path}"]
    try:
        config = Config.load(path, overrides={'seed': seed} if seed is not None else None)
    except yaml.YAMLError as e:
        mark = getattr(e, 'problem_mark', None)
        line = mark.line + 1 if mark is not None else '?'
        return None, [f"line {line}: malformed YAML: {getattr(e, 'problem', e)}"]

    data = config.as_dict()
    is_valid, errors = ExperimentConfigValidator().validate(data, config.line_map)
    if not is_valid:
        return None, errors
    return ExperimentConfig.from_dict(data), []


def _resolve(args) -> Optional[ExperimentConfig]:
    config, errors = load_experiment_config(args.config, getattr(args, 'seed', None))
    if config is None:
        for message in errors:
            logger.error(message)
            print(message, file=sys.stderr)
        return None
    if getattr(args, 'out', None):
        config.output_dir = args.out
    if getattr(args, 'workers', None):
        config.workers = args.workers
    return config


def plan(config: ExperimentConfig) -> dict:
    """What a run would do, without doing it"""
    sources, target = source_domains(config)
    return {
        'protocol': config.protocol.name,
        'sources': sources,
        'target': target,
        'rotate': config.protocol.rotate,
        'rounds': config.federation.rounds,
        'csa': config.csa.enabled,
        'gsd': config.gsd.enabled,
        'output_dir': config.resolved_output_dir(),
        'config': config.to_dict(),
    }


def cmd_run(args) -> int:
    config = _resolve(args)
    if config is None:
        return EXIT_CONFIG
    if args.dry_run:
        print(json.dumps(plan(config), indent=2, sort_keys=True))
        return EXIT_OK

    runner = ExperimentRunner(config, workers=config.workers)
    out_dir = config.resolved_output_dir()
    try:
        if config.protocol.rotate:
            results = runner.run_rotation(config.seed)
            rows = []
            for target, result in sorted(results.items()):
                runner.write_artifacts(result, ArtifactDAO(os.path.join(out_dir, f'target_{target}')))
                rows.append({'target': target, **result.summary})
            frame = pd.DataFrame(rows)
            average = {k: float(v) for k, v in frame.drop(columns='target').mean().items()}
            ArtifactDAO(out_dir).write_json('metrics.json', {'per_target': rows, 'average': average})
            logger.info(f"Rotation average: {average}")
        else:
            result = runner.run(config.seed)
            runner.write_artifacts(result, ArtifactDAO(out_dir))
            logger.info(f"Summary: {result.summary}")
    except PhaseError as e:
        logger.error(str(e))
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"[{runner.phase}] {e}")
        return EXIT_RUNTIME
    logger.info(f"Artifacts written to {out_dir}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.grid not in GRIDS:
        message = f"unknown grid '{args.grid}', expected one of {sorted(GRIDS)}"
        logger.error(message)
        print(message, file=sys.stderr)
        return EXIT_CONFIG
    config = _resolve(args)
    if config is None:
        return EXIT_CONFIG
    out_dir = args.out or os.path.join('runs', f'ablation_{args.grid}')
    try:
        table = AblationHarness(config, workers=config.workers).run(args.grid, args.seeds)
        dao = ArtifactDAO(out_dir)
        dao.write_frame('ablation.csv', table.summary.reset_index())
        dao.write_frame('ablation_runs.csv', table.runs)
        dao.write_text('ablation.txt', table.to_text())
        print(table.to_text())
    except PhaseError as e:
        logger.error(str(e))
        return EXIT_RUNTIME
    except ValueError as e:
        logger.error(f"[config] {e}")
        return EXIT_CONFIG
    except Exception as e:
        logger.error(f"[ablation] {e}")
        return EXIT_RUNTIME
    return EXIT_OK


def nest_overrides(overrides: dict) -> dict:
    """{'dataset.noise_sigma': 1.0} -> {'dataset': {'noise_sigma': 1.0}}"""
    nested: dict = {}
    for path, value in overrides.items():
        section, _, key = path.rpartition('.')
        node = nested
        for part in filter(None, section.split('.')):
            node = node.setdefault(part, {})
        node[key] = value
    return nested


def cmd_calibrate(args) -> int:
    config = _resolve(args)
    if config is None:
        return EXIT_CONFIG
    out_dir = args.out or os.path.join('runs', 'calibration')
    try:
        report = CalibrationService(config, workers=config.workers).run(args.seeds)
        dao = ArtifactDAO(out_dir)
        dao.write_frame('calibration.csv', report.rungs)
        dao.write_text('calibration.txt', report.to_text())
        if report.chosen is not None:
            dao.write_text('calibration.yaml', yaml.safe_dump(nest_overrides(report.overrides), sort_keys=True))
        print(report.to_text())
    except PhaseError as e:
        logger.error(str(e))
        return EXIT_RUNTIME
    except Exception as e:
        logger.error(f"[calibration] {e}")
        return EXIT_RUNTIME
    if report.chosen is None:
        logger.error("[calibration] no rung met the ceiling and margin")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_gen_data(args) -> int:
    config = _resolve(args)
    if config is None:
        return EXIT_CONFIG
    out_dir = config.resolved_output_dir()
    try:
        dataset = generate_federation(config, config.seed)
        ArtifactDAO(out_dir).save_federation(dataset)
    except Exception as e:
        logger.error(f"[data] {e}")
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_inspect_bank(args) -> int:
    try:
        with open(args.path, 'rb') as f:
            bank = decode_bank(f.read())
    except (OSError, ValueError) as e:
        logger.error(f"[bank] {e}")
        return EXIT_RUNTIME
    info = bank_to_dict(bank)
    frame = pd.DataFrame([
        {'client': t['client'], 'group': t['group'],
         **{f'mean{c}': m for c, m in enumerate(t['mean'])},
         **{f'var{c}': v for c, v in enumerate(t['var'])}}
        for t in info['templates']
    ])
    print(f"{len(bank)} templates, {bank.num_channels} channels")
    print(frame.to_string(index=False, float_format=lambda v: f'{v:.4f}'))
    return EXIT_OK


def cmd_grad_check(args) -> int:
    cases = run_audit(seed=args.seed, configurations=args.configurations)
    frame = pd.DataFrame([{'loss': c.name, 'config': c.seed, 'max_rel_error': c.report.max_rel_error}
                          for c in cases])
    worst = frame.groupby('loss')['max_rel_error'].max()
    print(worst.to_string(float_format=lambda v: f'{v:.3e}'))
    failed = [c for c in cases if not c.passed]
    if failed:
        logger.error(f"{len(failed)} gradient checks exceeded {TOLERANCE:g}")
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Federated re-identification simulator with semantic anchors '
                                                 'and global style diversification')
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'])
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='Run one experiment')
    run.add_argument('--config', required=True, help='Experiment YAML file')
    run.add_argument('--seed', type=int, help='Override the config seed')
    run.add_argument('--out', help='Output directory')
    run.add_argument('--dry-run', action='store_true', help='Validate and print the resolved plan only')
    run.add_argument('--workers', type=int, help='Worker pool size')
    run.set_defaults(func=cmd_run)

    ablate = sub.add_parser('ablate', help='Run an ablation grid over several seeds')
    ablate.add_argument('--config', required=True, help='Experiment YAML file')
    ablate.add_argument('--grid', required=True, help=f'One of {sorted(GRIDS)}')
    ablate.add_argument('--seeds', type=int, nargs='+', default=[0, 1, 2, 3, 4])
    ablate.add_argument('--out', help='Output directory')
    ablate.add_argument('--workers', type=int, help='Worker pool size')
    ablate.set_defaults(func=cmd_ablate)

    calibrate = sub.add_parser('calibrate', help='Pilot the difficulty ladder and pick benchmark defaults')
    calibrate.add_argument('--config', required=True, help='Experiment YAML file')
    calibrate.add_argument('--seeds', type=int, nargs='+', default=PILOT_SEEDS)
    calibrate.add_argument('--out', help='Output directory')
    calibrate.add_argument('--workers', type=int, help='Worker pool size')
    calibrate.set_defaults(func=cmd_calibrate)

    gen = sub.add_parser('gen-data', help='Export the synthetic federation')
    gen.add_argument('--config', required=True, help='Experiment YAML file')
    gen.add_argument('--seed', type=int, help='Override the config seed')
    gen.add_argument('--out', help='Output directory')
    gen.set_defaults(func=cmd_gen_data)

    inspect = sub.add_parser('inspect-bank', help='Print a bank.bin file')
    inspect.add_argument('path', help='Path to bank.bin')
    inspect.set_defaults(func=cmd_inspect_bank)

    grad = sub.add_parser('grad-check', help='Finite-difference check of every backward pass')
    grad.add_argument('--seed', type=int, default=0)
    grad.add_argument('--configurations', type=int, default=10)
    grad.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    return args.func(args)


if __name__ == '__main__':
    sys.exit(main())
