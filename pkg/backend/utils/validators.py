"""
Input validators.

The *_data validators check raw JSON documents before any object is built and
return {'valid', 'errors', 'warnings'} reports, errors being {'key', 'message'}.
validate_spec and validate_market check the analytic hypotheses of a built
problem by deterministic sampling against the constants each descriptor declares.
"""

import math
from typing import Dict, List, Optional

import numpy as np

from config import Config
from models.coefficient_profile import TIME_FUNCTION_KINDS, concavity_violations
from models.market_spec import CLAIM_KINDS, EXERCISE_KINDS
from models.problem_spec import GENERATOR_KINDS, OBSTACLE_KINDS, PAYOFF_KINDS
from utils.error_handlers import SpecRejectedError
from utils.rng import sampling_generator

# Relative slack on declared constants for floating-point rounding
_SLACK = 1e-9
_ZERO_TOL = 1e-12


def _error(key, message):
    return {'key': key, 'message': message}


def _is_number(value):
    return isinstance(value, (int, float)) and not isinstance(value, bool) and math.isfinite(value)


def _check_vector(data, key, errors, positive=False, prefix=''):
    values = data.get(key)
    if values is None:
        errors.append(_error(prefix + key, f'Missing required field: {prefix + key}'))
        return None
    if not isinstance(values, list) or not values:
        errors.append(_error(prefix + key, f'{prefix + key} must be a non-empty list'))
        return None
    if not all(_is_number(v) for v in values):
        errors.append(_error(prefix + key, f'{prefix + key} must contain finite numbers only'))
        return None
    if positive and any(v <= 0 for v in values):
        errors.append(_error(prefix + key, f'Every entry of {prefix + key} must be strictly positive'))
    return values


def _check_kind(section, key, valid, errors):
    if not isinstance(section, dict) or 'kind' not in section:
        errors.append(_error(key, f'{key} must be an object with a kind'))
        return None
    kind = section['kind']
    if kind not in valid:
        errors.append(_error(f'{key}.kind', f"Unknown {key} kind '{kind}'. Valid kinds: {list(valid)}"))
        return None
    return kind


def validate_profile_data(data, prefix=''):
    """Structural checks on {n, delta, sigma, rate}"""
    errors, warnings = [], []
    if not data:
        return {'valid': False, 'errors': [_error('profile', 'No data provided')], 'warnings': []}

    delta = _check_vector(data, 'delta', errors, prefix=prefix)
    sigma = _check_vector(data, 'sigma', errors, positive=True, prefix=prefix)
    if delta is not None and sigma is not None and len(delta) != len(sigma):
        errors.append(_error(prefix + 'sigma', f'delta has {len(delta)} entries but sigma has {len(sigma)}'))
    if 'n' in data and delta is not None and data['n'] != len(delta):
        errors.append(_error(prefix + 'n', f"n={data['n']} does not match {len(delta)} coefficients"))

    rate = data.get('rate', 0.0)
    if not _is_number(rate):
        _check_kind(rate, prefix + 'rate', TIME_FUNCTION_KINDS, errors)
    if sigma is not None and len(sigma) > 2:
        ranks = concavity_violations(np.asarray(sigma, dtype=float) ** 2)
        if ranks:
            warnings.append(f'sigma^2 is not concave at ranks {ranks}; simulation needs allow_nonconcave')

    return {'valid': not errors, 'errors': errors, 'warnings': warnings}


def validate_market_data(data):
    """Structural checks on a market section"""
    errors, warnings = [], []
    if not data:
        return {'valid': False, 'errors': [_error('market', 'No data provided')], 'warnings': []}

    prices = _check_vector(data, 'prices', errors, positive=True, prefix='market.')
    if prices is not None and any(a < b for a, b in zip(prices, prices[1:])):
        errors.append(_error('market.prices', 'Initial prices must be in ranked (non-increasing) order'))
    if 'bond' in data and (not _is_number(data['bond']) or data['bond'] <= 0):
        errors.append(_error('market.bond', 'Bond price must be a positive number'))
    if 'claim' not in data:
        errors.append(_error('market.claim', 'Missing required field: market.claim'))
    else:
        _check_kind(data['claim'], 'market.claim', CLAIM_KINDS, errors)
    exercise = data.get('exercise', {'kind': 'intrinsic'})
    if isinstance(exercise, str):
        exercise = {'kind': exercise}
    _check_kind(exercise, 'market.exercise', EXERCISE_KINDS, errors)
    if 'profile' in data:
        nested = validate_profile_data(data['profile'], prefix='market.profile.')
        errors.extend(nested['errors'])
        warnings.extend(nested['warnings'])

    return {'valid': not errors, 'errors': errors, 'warnings': warnings}


def validate_experiment_data(data):
    """Structural checks on a full experiment document"""
    errors, warnings = [], []
    if not data:
        return {'valid': False, 'errors': [_error('document', 'No data provided')], 'warnings': []}

    if not _is_number(data.get('T')):
        errors.append(_error('T', 'Missing or non-numeric horizon T'))
    if 't0' in data and not _is_number(data['t0']):
        errors.append(_error('t0', 't0 must be a number'))
    if _is_number(data.get('T')) and _is_number(data.get('t0', 0.0)) and data['T'] < data.get('t0', 0.0):
        errors.append(_error('T', 'Horizon T precedes t0'))

    numerics = data.get('numerics', {})
    if not isinstance(numerics.get('seed'), int) or isinstance(numerics.get('seed'), bool):
        errors.append(_error('numerics.seed', 'numerics.seed must be an explicit integer'))

    if 'market' in data:
        if 'profile' not in data['market']:
            nested = validate_profile_data(data)
            errors.extend(nested['errors'])
            warnings.extend(nested['warnings'])
        nested = validate_market_data(data['market'])
        errors.extend(nested['errors'])
        warnings.extend(nested['warnings'])
    else:
        nested = validate_profile_data(data)
        errors.extend(nested['errors'])
        warnings.extend(nested['warnings'])
        for key, valid in (('generator', GENERATOR_KINDS), ('terminal', PAYOFF_KINDS)):
            if key not in data:
                errors.append(_error(key, f'Missing required field: {key}'))
            else:
                _check_kind(data[key], key, valid, errors)
        if 'obstacle' in data:
            _check_kind(data['obstacle'], 'obstacle', OBSTACLE_KINDS, errors)
        x0 = _check_vector(data, 'x0', errors)
        if x0 is not None and isinstance(data.get('delta'), list) and len(x0) != len(data['delta']):
            errors.append(_error('x0', f'x0 has {len(x0)} coordinates for {len(data["delta"])} particles'))

    for i, probe in enumerate(data.get('probes', [])):
        if not isinstance(probe, dict) or not _is_number(probe.get('t')) or not ('x' in probe or 'p' in probe):
            errors.append(_error(f'probes[{i}]', 'Each probe needs a time t and a point x (or prices p)'))

    return {'valid': not errors, 'errors': errors, 'warnings': warnings}


# ---------------------------------------------------------------------------
# Hypothesis sampling
# ---------------------------------------------------------------------------

def _ranked_sample(rng, samples, n, radius):
    """Points of the ordered domain with every coordinate in [-radius, radius]."""
    x = rng.uniform(-radius, radius, size=(samples, n))
    return -np.sort(-x, axis=1)


def _entry(name, observed, declared, hard=True):
    observed = float(observed)
    declared = float(declared)
    if declared > 0:
        passed = observed <= declared * (1.0 + _SLACK) + _ZERO_TOL
        ratio = observed / declared
    else:
        passed = observed <= _ZERO_TOL
        ratio = observed
    return {'name': name, 'passed': bool(passed), 'worst_ratio': ratio,
            'worst_observed': observed, 'declared': declared, 'hard': hard}


def _finalize(entries, samples, seed):
    errors = [e['name'] for e in entries if e['hard'] and not e['passed']]
    warnings = [e['name'] for e in entries if not e['hard'] and not e['passed']]
    return {'valid': not errors, 'hypotheses': entries, 'errors': errors, 'warnings': warnings,
            'samples': samples, 'seed': seed}


def validate_spec(spec, profile, samples: int = Config.VALIDATION_SAMPLES, seed: int = 0,
                  radius: Optional[float] = None, horizon: float = 1.0) -> Dict:
    """Sample the Lipschitz, growth and ordering hypotheses of (F, g, h)."""
    if samples < 1:
        raise ValueError('samples must be >= 1')
    radius = Config.VALIDATION_RADIUS if radius is None else radius
    rng = sampling_generator(seed, 'validate_spec')
    n = profile.n
    entries = []

    t = rng.uniform(0.0, horizon, size=samples)
    x = _ranked_sample(rng, samples, n, radius)
    y, y2 = rng.normal(0.0, radius, size=(2, samples))
    z, z2 = rng.normal(0.0, radius, size=(2, samples, n))

    generator = spec.generator
    worst_lip = 0.0
    worst_growth = 0.0
    for i in range(samples):
        f1 = generator(t[i], x[i], y[i], z[i])
        f2 = generator(t[i], x[i], y2[i], z2[i])
        distance = abs(y[i] - y2[i]) + float(np.linalg.norm(z[i] - z2[i]))
        if distance > 0:
            worst_lip = max(worst_lip, abs(float(f1) - float(f2)) / distance)
        at_zero = generator(t[i], x[i], 0.0, np.zeros(n))
        worst_growth = max(worst_growth, abs(float(at_zero)) / (1.0 + float(np.linalg.norm(x[i]))))
    entries.append(_entry('generator_lipschitz', worst_lip, generator.lipschitz_constant()))
    entries.append(_entry('generator_growth', worst_growth, generator.growth_constant()))

    x_pair = _ranked_sample(rng, samples, n, radius)
    gap = np.linalg.norm(x - x_pair, axis=1)
    g_diff = np.abs(spec.terminal(x) - spec.terminal(x_pair))
    mask = gap > 0
    worst_terminal = float(np.max(g_diff[mask] / gap[mask])) if np.any(mask) else 0.0
    entries.append(_entry('terminal_lipschitz', worst_terminal, spec.terminal.lipschitz_constant(n, radius)))

    obstacle = spec.obstacle
    if obstacle.is_sentinel:
        entries.append(_entry('obstacle_growth', 0.0, 0.0))
        entries.append(_entry('obstacle_below_terminal', 0.0, 0.0))
    else:
        c, p = obstacle.growth_constants(n, radius)
        h = np.array([float(obstacle(t[i], x[i])) for i in range(samples)])
        growth = np.maximum(h, 0.0) / (1.0 + np.linalg.norm(x, axis=1) ** p)
        entries.append(_entry('obstacle_growth', float(np.max(growth)), c))
        excess = obstacle(horizon, x) - spec.terminal(x)
        entries.append(_entry('obstacle_below_terminal', max(float(np.max(excess)), 0.0), 0.0))

    entries.append({'name': 'concavity', 'passed': bool(profile.is_concave), 'worst_ratio': None,
                    'worst_observed': None, 'declared': None, 'hard': False,
                    'violations': concavity_violations(profile.sigma_array ** 2)})
    return _finalize(entries, samples, seed)


def validate_market(market, samples: int = Config.VALIDATION_SAMPLES, seed: int = 0) -> Dict:
    """Sample the price-Lipschitz claim, exercise growth and exercise <= claim at maturity."""
    if samples < 1:
        raise ValueError('samples must be >= 1')
    rng = sampling_generator(seed, 'validate_market')
    n = market.n
    scale = 2.0 * max(max(market.prices), market.claim.strike, 1.0)
    p = -np.sort(-rng.uniform(0.0, scale, size=(samples, n)), axis=1)
    q = -np.sort(-rng.uniform(0.0, scale, size=(samples, n)), axis=1)
    p = np.maximum(p, 1e-12)
    q = np.maximum(q, 1e-12)

    lipschitz = market.claim.price_lipschitz(n)
    distance = np.linalg.norm(p - q, axis=1)
    diff = np.abs(market.claim(p) - market.claim(q))
    mask = distance > 0
    worst = float(np.max(diff[mask] / distance[mask])) if np.any(mask) else 0.0
    entries = [_entry('claim_lipschitz', worst, lipschitz)]

    if market.exercise == 'none':
        entries.append(_entry('exercise_growth', 0.0, 0.0))
        entries.append(_entry('exercise_below_claim', 0.0, 0.0))
    else:
        h = market.exercise_value_at(p)
        at_origin = abs(float(market.claim(np.full(n, 1e-300))))
        declared = max(lipschitz, at_origin, abs(market.exercise_value))
        growth = np.abs(h) / (1.0 + np.linalg.norm(p, axis=1))
        entries.append(_entry('exercise_growth', float(np.max(growth)), declared))
        excess = h - market.claim(p)
        entries.append(_entry('exercise_below_claim', max(float(np.max(excess)), 0.0), 0.0))

    entries.append({'name': 'concavity', 'passed': bool(market.profile.is_concave), 'worst_ratio': None,
                    'worst_observed': None, 'declared': None, 'hard': False,
                    'violations': concavity_violations(market.profile.sigma_array ** 2)})
    return _finalize(entries, samples, seed)


def require_valid(report: Dict, what: str = 'problem') -> Dict:
    """Raise SpecRejectedError when any hard hypothesis failed."""
    if not report['valid']:
        raise SpecRejectedError(f"{what} rejected: failed {', '.join(report['errors'])}", report=report)
    return report


def create_validation_report(report: Dict) -> str:
    """Render a validation report for logs and the CLI"""
    lines = ['=== HYPOTHESIS VALIDATION REPORT ===']
    if 'hypotheses' in report:
        lines.append(f"samples={report['samples']} seed={report['seed']}")
        for entry in report['hypotheses']:
            status = 'PASS' if entry['passed'] else ('FAIL' if entry['hard'] else 'WARN')
            if entry['declared'] is None:
                lines.append(f"[{status}] {entry['name']}")
            else:
                lines.append(f"[{status}] {entry['name']}: observed {entry['worst_observed']:.6g} "
                             f"declared {entry['declared']:.6g}")
        return '\n'.join(lines)

    errors: List = report.get('errors', [])
    if not errors:
        lines.append('document OK')
    for error in errors:
        lines.append(f"[FAIL] {error['key']}: {error['message']}")
    for warning in report.get('warnings', []):
        lines.append(f'[WARN] {warning}')
    return '\n'.join(lines)
