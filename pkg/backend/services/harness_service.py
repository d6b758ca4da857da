# services/harness_service.py
"""
Experiment orchestration: Monte Carlo vs PDE cross-validation, convergence
ladders and reproducible scenario directories with a manifest.
"""

import hashlib
import json
import os
import platform
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import scipy

from config import Config
from models.experiment_config import ExperimentConfig
from models.path_bundle import TimeGrid
from models.rank_view import SimplexPoint
from models.simplex_grid import MAX_PDE_DIMENSION, SimplexGrid
from models.solutions import GridSolution
from services.bsde_solver import estimate_solution, make_basis, solve_penalized, solve_reflected
from services.pde_solver import boundary_residual, solve_obstacle
from services.pricing_service import binomial_oracle, price_american, to_log_problem
from services.sde_engine import SDEEngine, estimate_local_times, strong_error
from utils.decorators import timed
from utils.error_handlers import RankFlowError, ToleranceFailure, ValidationError
from utils.logging_config import get_logger
from utils.validators import require_valid, validate_market, validate_spec

logger = get_logger(__name__)

CONVERGENCE_AXES = ('dt', 'paths', 'mesh', 'penalty')
DEFAULT_LADDERS = {
    'dt': [16, 32, 64],
    'paths': [1000, 4000, 16000],
    'mesh': [25, 50, 100],
}
PATHS_RATIO_BAND = (1.4, 2.6)


def resolve_problem(config: ExperimentConfig):
    """(profile, spec, x0) in the coordinates the solvers work in."""
    if config.is_market:
        return to_log_problem(config.market)
    return config.profile, config.problem, config.x0


def validate_config(config: ExperimentConfig) -> Dict:
    """Hypothesis report for the scenario; raises SpecRejectedError on a hard failure."""
    if config.is_market:
        report = validate_market(config.market, Config.VALIDATION_SAMPLES, config.seed)
        return require_valid(report, 'market')
    report = validate_spec(config.problem, config.profile, Config.VALIDATION_SAMPLES, config.seed,
                           horizon=config.T)
    return require_valid(report, 'problem')


def pde_grid(config: ExperimentConfig, x0: SimplexPoint, space_steps=None,
             time_steps: Optional[int] = None) -> SimplexGrid:
    pde = config.numerics.pde
    if x0.n > MAX_PDE_DIMENSION:
        raise ValidationError(f'PDE side supports n <= {MAX_PDE_DIMENSION}; n={x0.n} is Monte Carlo only')
    steps = space_steps if space_steps is not None else pde.steps_for(x0.n)
    return SimplexGrid.build(x0.coords, pde.radius, steps, time_steps or pde.time_steps,
                             config.t0, config.T)


def solve_pde(config: ExperimentConfig, retain: Sequence[float] = (), grid: Optional[SimplexGrid] = None,
              **overrides) -> GridSolution:
    profile, spec, x0 = resolve_problem(config)
    pde = config.numerics.pde
    options = dict(mode=pde.mode, penalty=pde.penalty, theta=pde.theta, psor=pde.psor,
                   retain=tuple(pde.retain) + tuple(retain))
    options.update(overrides)
    return solve_obstacle(profile, spec, grid or pde_grid(config, x0), **options)


def _probes(config: ExperimentConfig, x0: SimplexPoint) -> List[Dict]:
    return config.probes or [{'t': config.t0, 'x': list(x0.coords)}]


@timed('cross_validate')
def cross_validate(config: ExperimentConfig) -> Dict:
    """u(t, x) by Monte Carlo and by the PDE at every probe, with a tolerance verdict."""
    validation = validate_config(config)
    profile, spec, x0 = resolve_problem(config)
    numerics = config.numerics
    probes = _probes(config, x0)
    grid = pde_grid(config, x0)
    solution = solve_pde(config, retain=[p['t'] for p in probes], grid=grid)

    rows = []
    for probe in probes:
        t, x = float(probe['t']), [float(v) for v in probe['x']]
        row = {'t': t, 'x': x}
        if not grid.contains(x):
            logger.warning('Probe x=%s lies outside the truncated PDE domain; excluded', x)
            row.update({'excluded': True, 'reason': 'outside PDE domain'})
            rows.append(row)
            continue
        mc, _ = estimate_solution(profile, spec, x, t, config.T, numerics)
        pde_value = solution.probe(t, x)
        gap = mc.u0 - pde_value
        tolerance = numerics.tolerance_abs + numerics.tolerance_k * mc.stderr
        row.update({'excluded': False, 'mc': mc.u0, 'stderr': mc.stderr, 'pde': pde_value,
                    'gap': gap, 'tolerance': tolerance, 'passed': bool(abs(gap) <= tolerance)})
        rows.append(row)

    evaluated = [r for r in rows if not r['excluded']]
    report = {
        'scenario': config.scenario,
        'config_sha256': config.config_hash,
        'probes': rows,
        'evaluated': len(evaluated),
        'excluded': len(rows) - len(evaluated),
        'passed': bool(evaluated) and all(r['passed'] for r in evaluated),
        'tolerance': {'abs': numerics.tolerance_abs, 'k': numerics.tolerance_k},
        'pde': {'summary': solution.summary(), 'boundary_residual': boundary_residual(solution)['max']},
        'validation': validation,
    }
    if config.is_market:
        report['oracle'] = _oracle_gaps(config, rows)
    logger.info('Cross-validation %s: %d probes, %d excluded, passed=%s', config.scenario,
                len(rows), report['excluded'], report['passed'])
    return report


def require_verdict(result: Dict, passed: bool, what: str) -> Dict:
    """Raise ToleranceFailure carrying the result when a harness verdict failed."""
    if passed:
        return result
    failed = [p for p in result.get('probes', []) if p.get('passed') is False]
    raise ToleranceFailure(f'{what}: tolerance verdict failed' +
                           (f' at {len(failed)} evaluation point(s)' if failed else ''),
                           details={'result': result, 'failed_points': failed})


def _oracle_gaps(config: ExperimentConfig, rows: List[Dict]) -> Optional[Dict]:
    """Relative gaps of both sides to the binomial tree at the t0 probe on the initial prices."""
    market = config.market
    claim = market.claim
    if market.n != 1 or claim.kind not in ('put', 'call') or market.profile.rate.kind != 'constant':
        return None
    style = 'american' if market.exercise == 'intrinsic' else 'european'
    oracle = binomial_oracle(market.prices[0], claim.strike, market.profile.rate.value,
                             market.profile.sigma[0], market.T - market.t0, kind=claim.kind, style=style)
    x0 = float(market.log_prices[0])
    for row in rows:
        if not row['excluded'] and row['t'] == market.t0 and abs(row['x'][0] - x0) < 1e-12:
            return {'price': oracle,
                    'mc_relative_gap': abs(row['mc'] - oracle) / oracle if oracle else None,
                    'pde_relative_gap': abs(row['pde'] - oracle) / oracle if oracle else None}
    return {'price': oracle}


def _ladder(config: ExperimentConfig, axis: str) -> List:
    if axis == 'penalty':
        ladder = list(config.numerics.ladder.get('penalty', config.numerics.penalty_ladder))
    else:
        ladder = list(config.numerics.ladder.get(axis, DEFAULT_LADDERS[axis]))
    if len(ladder) < 3:
        raise ValidationError(f'Convergence ladder for {axis} needs at least 3 levels, got {len(ladder)}',
                              details={'key': f'numerics.ladder.{axis}'})
    if axis in ('dt', 'mesh') and any(b != 2 * a for a, b in zip(ladder, ladder[1:])):
        raise ValidationError(f'The {axis} ladder must double at every level', details={'key': f'numerics.ladder.{axis}'})
    return ladder


def _with_differences(rows: List[Dict], key: str) -> List[Dict]:
    previous = None
    for row in rows:
        row['difference'] = None if previous is None or row[key] is None else row[key] - previous
        previous = row[key]
    return rows


@timed('convergence_table')
def convergence_table(config: ExperimentConfig, axis: str) -> Dict:
    """One row per ladder level with the axis statistic and a monotone-trend verdict."""
    if axis not in CONVERGENCE_AXES:
        raise ValidationError(f"Unknown convergence axis '{axis}'. Valid axes: {list(CONVERGENCE_AXES)}")
    ladder = _ladder(config, axis)
    profile, spec, x0 = resolve_problem(config)
    table = {'dt': _dt_table, 'paths': _paths_table, 'mesh': _mesh_table, 'penalty': _penalty_table}[axis](
        config, profile, spec, x0, ladder)
    table.update({'axis': axis, 'scenario': config.scenario, 'ladder': ladder})
    logger.info('Convergence %s for %s: verdict=%s', axis, config.scenario, table['verdict'])
    return table


def _dt_table(config, profile, spec, x0, ladder) -> Dict:
    numerics = config.numerics
    engine = SDEEngine(threads=numerics.threads)
    finest = TimeGrid(config.t0, config.T, 2 * ladder[-1])
    bundles = engine.simulate_nested(profile, x0, finest, numerics.n_paths, numerics.seed,
                                     levels=len(ladder) + 1, allow_nonconcave=numerics.allow_nonconcave)
    reference = bundles[-1]
    rows = []
    for steps, bundle in zip(ladder, bundles[:-1]):
        if profile.n > 1:
            bundle = estimate_local_times(bundle, profile)
        solution = solve_reflected(bundle, spec, make_basis(numerics.basis_degree, numerics.split_sample))
        rows.append({'level': len(rows), 'time_steps': steps, 'dt': bundle.grid.dt,
                     'strong_error': strong_error(bundle, reference),
                     'u0': solution.u0, 'stderr': solution.stderr,
                     'skorokhod_sum': solution.diagnostics['skorokhod_sum'],
                     'max_obstacle_violation': solution.diagnostics['max_obstacle_violation'],
                     'K_nondecreasing': solution.diagnostics['K_nondecreasing']})
    _with_differences(rows, 'strong_error')
    errors = [r['strong_error'] for r in rows]
    verdict = all(b < a for a, b in zip(errors, errors[1:]))
    details = {'strong_error_decreasing': verdict}
    if spec.has_obstacle:
        sums = [r['skorokhod_sum'] for r in rows]
        details['skorokhod_decreasing'] = all(b <= a for a, b in zip(sums, sums[1:]))
    return {'rows': rows, 'verdict': verdict, 'details': details, 'statistic': 'strong_error'}


def _paths_table(config, profile, spec, x0, ladder) -> Dict:
    rows = []
    for n_paths in ladder:
        numerics = config.numerics.with_overrides(n_paths=int(n_paths))
        solution, _ = estimate_solution(profile, spec, x0, config.t0, config.T, numerics)
        rows.append({'level': len(rows), 'n_paths': int(n_paths), 'u0': solution.u0,
                     'stderr': solution.stderr})
    _with_differences(rows, 'stderr')
    low, high = PATHS_RATIO_BAND
    ratios = []
    rows[0]['stderr_ratio'] = None
    for a, b in zip(rows, rows[1:]):
        ratio = a['stderr'] / b['stderr'] if b['stderr'] > 0 else float('inf')
        b['stderr_ratio'] = ratio
        # stderr ~ 1/sqrt(M); rescale so a x4 ladder step is compared against 2
        ratios.append(2.0 * ratio / np.sqrt(b['n_paths'] / a['n_paths']))
    verdict = all(low <= r <= high for r in ratios)
    return {'rows': rows, 'verdict': verdict, 'details': {'ratio_band': [low, high]}, 'statistic': 'stderr'}


def _interior(values: np.ndarray) -> np.ndarray:
    """Drop the outer truncation boundary: both ends of the sum axis, the top of each gap axis."""
    index = (slice(1, -1),) + tuple(slice(0, -1) for _ in range(values.ndim - 1))
    return values[index]


def _mesh_table(config, profile, spec, x0, ladder) -> Dict:
    base_time = config.numerics.pde.time_steps
    time_for = {steps: max(1, base_time * steps // ladder[0]) for steps in ladder}
    reference_steps = 2 * ladder[-1]
    reference_grid = pde_grid(config, x0, reference_steps, 2 * time_for[ladder[-1]])
    reference = solve_pde(config, grid=reference_grid)
    rows = []
    for steps in ladder:
        solution = solve_pde(config, grid=pde_grid(config, x0, steps, time_for[steps]))
        factor = reference_steps // steps
        coarse_view = reference.values[0][tuple(slice(None, None, factor) for _ in range(x0.n))]
        error = float(np.max(np.abs(_interior(solution.values[0]) - _interior(coarse_view))))
        rows.append({'level': len(rows), 'space_steps': steps, 'time_steps': time_for[steps],
                     'error': error, 'boundary_residual': solution.boundary_residual,
                     'complementarity_residual': solution.complementarity_residual})
    _with_differences(rows, 'error')
    errors = [r['error'] for r in rows]
    verdict = all(b < a for a, b in zip(errors, errors[1:]))
    return {'rows': rows, 'verdict': verdict, 'details': {'reference_space_steps': reference_steps},
            'statistic': 'error'}


def _penalty_table(config, profile, spec, x0, ladder) -> Dict:
    numerics = config.numerics
    engine = SDEEngine(threads=numerics.threads)
    grid = TimeGrid(config.t0, config.T, numerics.time_steps)
    bundle = engine.simulate(profile, x0, grid, numerics.n_paths, numerics.seed,
                             allow_nonconcave=numerics.allow_nonconcave)
    basis = make_basis(numerics.basis_degree, numerics.split_sample)
    reflected = solve_reflected(bundle, spec, basis)
    rows = []
    for m in ladder:
        solution = solve_penalized(bundle, spec, basis, float(m))
        rows.append({'level': len(rows), 'penalty': float(m), 'u0': solution.u0, 'stderr': solution.stderr,
                     'gap_to_reflected': reflected.u0 - solution.u0})
    _with_differences(rows, 'u0')
    verdict = all(b['u0'] >= a['u0'] - b['stderr'] for a, b in zip(rows, rows[1:]))
    return {'rows': rows, 'verdict': verdict, 'statistic': 'u0',
            'details': {'reflected_u0': reflected.u0, 'reflected_stderr': reflected.stderr,
                        'relative_gap_last': abs(rows[-1]['gap_to_reflected']) / abs(reflected.u0)
                        if reflected.u0 else None}}


def write_table(table: Dict, path: str) -> str:
    rows = table['rows']
    columns = list(rows[0].keys())
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False, float_format=Config.CSV_FLOAT_FORMAT)
    return path


def _json_default(value):
    if hasattr(value, 'tolist'):
        return value.tolist()
    return str(value)


def write_json(payload: Dict, path: str) -> str:
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_json_default)
    return path


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(65536), b''):
            digest.update(chunk)
    return digest.hexdigest()


def versions() -> Dict:
    return {'rankflow': Config.APP_VERSION, 'python': platform.python_version(),
            'numpy': np.__version__, 'scipy': scipy.__version__, 'pandas': pd.__version__}


def write_manifest(config: ExperimentConfig, directory: str, files: List[str]) -> Dict:
    """Config hash, seeds, versions and a digest per emitted file; no wall-clock data."""
    manifest = {
        'scenario': config.scenario,
        'config_sha256': config.config_hash,
        'config': json.loads(config.canonical_json()),
        'seeds': {'master': config.seed},
        'versions': versions(),
        'files': {os.path.relpath(p, directory): _sha256(p) for p in sorted(files)},
    }
    write_json(manifest, os.path.join(directory, 'manifest.json'))
    return manifest


@timed('run_scenario')
def run_scenario(config: ExperimentConfig, output_dir: Optional[str] = None, dump_paths: bool = False) -> Dict:
    """Validate, solve every representation the scenario supports, write artifacts and manifest."""
    directory = output_dir or config.output_dir or os.path.join(Config.OUTPUT_DIR, config.scenario)
    validation = validate_config(config)
    try:
        os.makedirs(directory, exist_ok=True)
    except OSError as exc:
        raise RankFlowError(f'Cannot create output directory {directory}: {exc}', details={'path': directory})

    files: List[str] = []
    passed = True

    def emit(writer, name, payload):
        path = os.path.join(directory, name)
        try:
            files.append(writer(payload, path))
        except OSError as exc:
            raise RankFlowError(f'Cannot write {path}: {exc}', details={'path': path})

    emit(write_json, 'validation.json', validation)
    profile, spec, x0 = resolve_problem(config)
    numerics = config.numerics

    if config.is_market:
        result = price_american(config.market, numerics)
        emit(write_json, 'pricing.json', result)
    else:
        solution, bundle = estimate_solution(profile, spec, x0, config.t0, config.T, numerics)
        emit(lambda s, p: s.write_csv(p), 'bsde_steps.csv', solution)
        emit(write_json, 'bsde.json', solution.summary())
        if dump_paths and bundle is not None:
            if profile.n > 1:
                bundle = estimate_local_times(bundle, profile)
            emit(lambda b, p: b.write_csv(p), 'paths.csv', bundle)

    if profile.n <= MAX_PDE_DIMENSION and config.T > config.t0:
        report = cross_validate(config)
        passed = passed and report['passed']
        emit(write_json, 'cross_validation.json', report)

    for axis in CONVERGENCE_AXES:
        if axis in numerics.ladder:
            if axis == 'mesh' and profile.n > MAX_PDE_DIMENSION:
                continue
            table = convergence_table(config, axis)
            passed = passed and table['verdict']
            emit(write_table, f'convergence_{axis}.csv', table)

    manifest = write_manifest(config, directory, files)
    logger.info('Scenario %s written to %s (%d files, passed=%s)', config.scenario, directory,
                len(files), passed)
    return {'output_dir': directory, 'manifest': manifest, 'passed': passed}
