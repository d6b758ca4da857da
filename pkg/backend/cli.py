#!/usr/bin/env python3
# backend/cli.py - RankFlow command line
"""
rankflow <command> --config scenario.json [--seed S] [--out DIR] [--threads K] [--dump-paths]

Every command prints exactly one JSON line on stdout; logs go to stderr and
the log file. Exit code 0 on pass, 2 on a tolerance failure, 1 on error.
"""

import argparse
import json
import os
import sys
from typing import Dict, List, Optional, Tuple

current_dir = os.path.dirname(os.path.abspath(__file__))
if current_dir not in sys.path:
    sys.path.insert(0, current_dir)

from config import Config, get_config  # noqa: E402
from models.experiment_config import ExperimentConfig  # noqa: E402
from models.path_bundle import TimeGrid  # noqa: E402
from services.bsde_solver import estimate_solution  # noqa: E402
from services.harness_service import (CONVERGENCE_AXES, convergence_table, cross_validate,  # noqa: E402
                                      require_verdict, resolve_problem, run_scenario, solve_pde,
                                      validate_config, write_json, write_table)
from services.pde_solver import boundary_residual  # noqa: E402
from services.pricing_service import price_american  # noqa: E402
from services.sde_engine import SDEEngine, estimate_local_times, ranked_brownian_diagnostics  # noqa: E402
from utils.error_handlers import RankFlowError, ToleranceFailure, ValidationError  # noqa: E402
from utils.logging_config import get_logger, setup_logging  # noqa: E402

logger = get_logger(__name__)

EXIT_PASS = 0
EXIT_ERROR = 1
EXIT_TOLERANCE = 2


def build_argument_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', required=True, help='Experiment JSON document')
    common.add_argument('--seed', type=int, default=None, help='Master seed (overrides numerics.seed)')
    common.add_argument('--out', default=None, help='Output directory (created if missing)')
    common.add_argument('--threads', type=int, default=None, help='Worker threads for path simulation')
    common.add_argument('--dump-paths', action='store_true', help='Write the simulated paths as CSV')

    parser = argparse.ArgumentParser(prog='rankflow',
                                     description='Rank-based diffusions, reflected BSDEs and obstacle PDEs')
    commands = parser.add_subparsers(dest='command', required=True)
    commands.add_parser('simulate', parents=[common], help='Simulate the particle system')
    commands.add_parser('solve-bsde', parents=[common], help='Plain BSDE (sentinel obstacle)')
    reflected = commands.add_parser('solve-reflected', parents=[common], help='Reflected BSDE')
    reflected.add_argument('--penalty', type=float, default=None,
                           help='Solve the penalised BSDE with this m instead of projecting')
    commands.add_parser('solve-pde', parents=[common], help='Obstacle PDE on the truncated domain')
    commands.add_parser('price-american', parents=[common], help='American claim on ranked prices')
    commands.add_parser('cross-validate', parents=[common], help='Monte Carlo vs PDE at the probes')
    convergence = commands.add_parser('convergence', parents=[common], help='Convergence ladder table')
    convergence.add_argument('--axis', required=True, choices=CONVERGENCE_AXES)
    commands.add_parser('run', parents=[common], help='Full scenario with manifest')
    return parser


def load_config(args) -> ExperimentConfig:
    try:
        with open(args.config, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except OSError as exc:
        raise ValidationError(f'Cannot read config {args.config}: {exc}', details={'path': args.config})
    except json.JSONDecodeError as exc:
        raise ValidationError(f'Config {args.config} is not valid JSON: {exc}', details={'path': args.config})
    return ExperimentConfig.from_dict(data, seed=args.seed, threads=args.threads, output_dir=args.out)


def output_directory(config: ExperimentConfig) -> str:
    directory = config.output_dir or os.path.join(Config.OUTPUT_DIR, config.scenario)
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise RankFlowError(f'Cannot create output directory {directory}: {exc}', details={'path': directory})
    return directory


def cmd_simulate(config: ExperimentConfig, args, directory: str) -> Tuple[Dict, bool]:
    validate_config(config)
    profile, _, x0 = resolve_problem(config)
    numerics = config.numerics
    engine = SDEEngine(threads=numerics.threads)
    bundle = engine.simulate(profile, x0, TimeGrid(config.t0, config.T, numerics.time_steps),
                             numerics.n_paths, numerics.seed, allow_nonconcave=numerics.allow_nonconcave)
    bundle = estimate_local_times(bundle, profile)
    result = {'summary': bundle.summary(), 'ranked_brownian': ranked_brownian_diagnostics(bundle)}
    files = [write_json(result, os.path.join(directory, 'simulate.json'))]
    if args.dump_paths:
        files.append(bundle.write_csv(os.path.join(directory, 'paths.csv')))
    result['files'] = files
    return result, True


def _solve(config: ExperimentConfig, args, directory: str, mode: str, penalty: float = 0.0) -> Tuple[Dict, bool]:
    validate_config(config)
    profile, spec, x0 = resolve_problem(config)
    solution, bundle = estimate_solution(profile, spec, x0, config.t0, config.T, config.numerics,
                                         mode=mode, penalty=penalty)
    stem = {'bsde': 'bsde', 'reflected': 'reflected', 'penalized': 'penalized'}[mode]
    files = [solution.write_csv(os.path.join(directory, f'{stem}_steps.csv')),
             write_json(solution.summary(), os.path.join(directory, f'{stem}.json'))]
    if args.dump_paths and bundle is not None:
        files.append(estimate_local_times(bundle, profile).write_csv(os.path.join(directory, 'paths.csv')))
    return {'u0': solution.u0, 'stderr': solution.stderr, 'diagnostics': solution.diagnostics,
            'files': files}, True


def cmd_solve_bsde(config, args, directory):
    return _solve(config, args, directory, 'bsde')


def cmd_solve_reflected(config, args, directory):
    if args.penalty is not None:
        return _solve(config, args, directory, 'penalized', args.penalty)
    return _solve(config, args, directory, 'reflected')


def cmd_solve_pde(config: ExperimentConfig, args, directory: str) -> Tuple[Dict, bool]:
    validate_config(config)
    solution = solve_pde(config, retain=[p['t'] for p in config.probes])
    probes = [{'t': p['t'], 'x': p['x'], 'u': solution.probe(p['t'], p['x'])} for p in config.probes]
    files = [solution.write_csv(os.path.join(directory, 'pde_grid.csv')),
             solution.write_json(os.path.join(directory, 'pde.json'), config.probes)]
    return {'summary': solution.summary(), 'boundary_residual': boundary_residual(solution)['max'],
            'probes': probes, 'files': files}, True


def cmd_price_american(config: ExperimentConfig, args, directory: str) -> Tuple[Dict, bool]:
    if not config.is_market:
        raise ValidationError('price-american needs a market section in the config', details={'key': 'market'})
    result = price_american(config.market, config.numerics)
    result['files'] = [write_json(result, os.path.join(directory, 'pricing.json'))]
    return result, True


def cmd_cross_validate(config: ExperimentConfig, args, directory: str) -> Tuple[Dict, bool]:
    report = cross_validate(config)
    report['files'] = [write_json(report, os.path.join(directory, 'cross_validation.json'))]
    return report, report['passed']


def cmd_convergence(config: ExperimentConfig, args, directory: str) -> Tuple[Dict, bool]:
    table = convergence_table(config, args.axis)
    table['files'] = [write_table(table, os.path.join(directory, f'convergence_{args.axis}.csv'))]
    return table, table['verdict']


def cmd_run(config: ExperimentConfig, args, directory: str) -> Tuple[Dict, bool]:
    result = run_scenario(config, directory, dump_paths=args.dump_paths)
    return result, result['passed']


HANDLERS = {
    'simulate': cmd_simulate,
    'solve-bsde': cmd_solve_bsde,
    'solve-reflected': cmd_solve_reflected,
    'solve-pde': cmd_solve_pde,
    'price-american': cmd_price_american,
    'cross-validate': cmd_cross_validate,
    'convergence': cmd_convergence,
    'run': cmd_run,
}


def _print_line(payload: Dict) -> None:
    print(json.dumps(payload, sort_keys=True, default=lambda v: v.tolist() if hasattr(v, 'tolist') else str(v)))


def _run_summary(args, config: ExperimentConfig, passed: bool) -> Dict:
    return {'command': args.command, 'scenario': config.scenario, 'config_sha256': config.config_hash,
            'seed': config.seed, 'passed': passed}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_argument_parser().parse_args(argv)
    setup_logging(get_config(os.environ.get('RANKFLOW_ENV', 'production')))
    try:
        config = load_config(args)
        directory = output_directory(config)
        result, passed = HANDLERS[args.command](config, args, directory)
        require_verdict(result, passed, args.command)
    except ToleranceFailure as exc:
        logger.warning('Tolerance failure: %s', exc.message)
        payload = _run_summary(args, config, False)
        payload.update(exc.details['result'])
        payload.update({'error': type(exc).__name__, 'message': exc.message,
                        'failed_points': exc.details['failed_points']})
        _print_line(payload)
        return EXIT_TOLERANCE
    except RankFlowError as exc:
        logger.error('%s: %s', type(exc).__name__, exc.message)
        _print_line({'error': type(exc).__name__, 'message': exc.message, 'details': exc.details})
        return EXIT_ERROR
    except Exception as exc:
        logger.exception('Unexpected error in %s', args.command)
        _print_line({'error': 'InternalError', 'message': str(exc)})
        return EXIT_ERROR

    payload = _run_summary(args, config, True)
    payload.update(result)
    _print_line(payload)
    return EXIT_PASS


if __name__ == '__main__':
    sys.exit(main())
