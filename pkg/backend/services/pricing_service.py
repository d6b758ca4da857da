# services/pricing_service.py
"""
American claims on rank-based stock prices.

Prices follow dp_i = p_i (delta_rank dt + sigma_rank dW_i); in log coordinates
this is the rank-based system with drifts delta_j - sigma_j^2 / 2. The price
of the claim is Y(t0) of the reflected problem with the pricing generator.
"""

import math
from typing import Dict, List, Optional, Tuple

import numpy as np

from config import Config
from models.coefficient_profile import CoefficientProfile
from models.market_spec import MarketSpec
from models.path_bundle import TimeGrid
from models.problem_spec import GeneratorSpec, ObstacleSpec, ProblemSpec
from models.rank_view import SimplexPoint
from services.bsde_solver import make_basis, solve_bsde, solve_reflected
from services.sde_engine import SDEEngine
from utils.decorators import timed
from utils.error_handlers import ValidationError
from utils.logging_config import get_logger
from utils.validators import require_valid, validate_market

logger = get_logger(__name__)

ORACLE_STEPS = 2000


def log_profile(profile: CoefficientProfile) -> CoefficientProfile:
    """Drifts of the log prices: delta_j - sigma_j^2 / 2."""
    sigma = profile.sigma_array
    return CoefficientProfile(delta=tuple(profile.delta_array - 0.5 * sigma ** 2),
                              sigma=profile.sigma, rate=profile.rate)


def to_log_problem(market: MarketSpec) -> Tuple[CoefficientProfile, ProblemSpec, SimplexPoint]:
    """(profile', ProblemSpec, x0) of the market in ranked log-price coordinates."""
    profile = market.profile
    generator = GeneratorSpec(kind='pricing', rate=profile.rate, delta=profile.delta, sigma=profile.sigma)
    terminal = market.claim.log_payoff()
    if market.exercise == 'intrinsic':
        obstacle = ObstacleSpec(kind='payoff', payoff=terminal, maturity=market.T)
    elif market.exercise == 'constant':
        obstacle = ObstacleSpec(kind='constant', value=market.exercise_value, maturity=market.T)
    else:
        obstacle = ObstacleSpec()
    spec = ProblemSpec(generator=generator, terminal=terminal, obstacle=obstacle)
    return log_profile(profile), spec, SimplexPoint.from_coords(market.log_prices)


def binomial_oracle(p: float, strike: float, r: float, sigma: float, T: float,
                    steps: int = ORACLE_STEPS, kind: str = 'put', style: str = 'american') -> float:
    """Cox-Ross-Rubinstein recombining tree for a single stock."""
    if kind not in ('put', 'call'):
        raise ValidationError(f"Unknown option kind '{kind}'. Valid kinds: ['put', 'call']")
    if style not in ('american', 'european'):
        raise ValidationError(f"Unknown exercise style '{style}'. Valid styles: ['american', 'european']")
    if not (p > 0 and sigma > 0 and strike >= 0 and T >= 0 and steps >= 1):
        raise ValidationError('Binomial oracle needs p > 0, sigma > 0, strike >= 0, T >= 0 and steps >= 1',
                              details={'p': p, 'sigma': sigma, 'strike': strike, 'T': T, 'steps': steps})
    sign = 1.0 if kind == 'call' else -1.0
    if T == 0:
        return max(sign * (p - strike), 0.0)

    dt = T / steps
    up = math.exp(sigma * math.sqrt(dt))
    down = 1.0 / up
    growth = math.exp(r * dt)
    q = (growth - down) / (up - down)
    if not 0.0 < q < 1.0:
        raise ValidationError(f'Risk-neutral probability {q:.4g} outside (0, 1); increase steps',
                              details={'q': q, 'steps': steps})
    discount = 1.0 / growth

    powers = np.arange(steps, -steps - 1, -2)
    values = np.maximum(sign * (p * up ** powers - strike), 0.0)
    for i in range(steps - 1, -1, -1):
        values = discount * (q * values[:-1] + (1.0 - q) * values[1:])
        if style == 'american':
            prices = p * up ** np.arange(i, -i - 1, -2)
            values = np.maximum(values, sign * (prices - strike))
    return float(values[0])


def exercise_boundary(solution, bundle, rank: int) -> List[Dict]:
    """Per step, the largest ranked price at which some path exercises."""
    samples = []
    times = bundle.grid.times
    flags = solution.stopped if solution.stopped is not None else solution.dK > 0
    for k in range(bundle.grid.steps):
        exercised = flags[:, k]
        if np.any(exercised):
            log_price = float(np.max(bundle.ranked[exercised, k, rank - 1]))
            samples.append({'t': float(times[k]), 'price': math.exp(log_price),
                            'paths': int(np.count_nonzero(exercised))})
    return samples


def _oracle(market: MarketSpec) -> Optional[float]:
    """CRR price when the market is a single stock with a put or call and constant rate."""
    claim = market.claim
    if market.n != 1 or claim.kind not in ('put', 'call') or market.profile.rate.kind != 'constant':
        return None
    if market.exercise == 'constant':
        return None
    style = 'american' if market.exercise == 'intrinsic' else 'european'
    return binomial_oracle(market.prices[0], claim.strike, market.profile.rate.value,
                           market.profile.sigma[0], market.T - market.t0, ORACLE_STEPS,
                           kind=claim.kind, style=style)


@timed('price_american')
def price_american(market: MarketSpec, numerics, block_size: int = Config.PATH_BLOCK_SIZE) -> Dict:
    """Reflected price, European counterpart on the same paths, oracle and hedge diagnostics."""
    report = require_valid(validate_market(market, Config.VALIDATION_SAMPLES, numerics.seed), 'market')
    profile, spec, x0 = to_log_problem(market)
    horizon = market.T - market.t0
    oracle = _oracle(market)

    if horizon == 0:
        value = float(market.claim(np.asarray(market.prices)))
        return {'price': value, 'stderr': 0.0, 'european_price': value, 'european_stderr': 0.0,
                'early_exercise_premium': 0.0, 'exercise_boundary_samples': [],
                'oracle_price': oracle, 'bond_value_T': market.bond_value(market.T),
                'diagnostics': {'degenerate_horizon': True, 'validation': report}}

    grid = TimeGrid(market.t0, market.T, numerics.time_steps)
    engine = SDEEngine(threads=numerics.threads, block_size=block_size)
    bundle = engine.simulate(profile, x0, grid, numerics.n_paths, numerics.seed,
                             allow_nonconcave=numerics.allow_nonconcave)
    basis = make_basis(numerics.basis_degree, numerics.split_sample)

    european = solve_bsde(bundle, spec.without_obstacle(), basis)
    american = solve_reflected(bundle, spec, basis) if spec.has_obstacle else european

    rank = market.claim.rank if market.claim.kind in ('put', 'call', 'stock') else 1
    result = {
        'price': american.u0,
        'stderr': american.stderr,
        'european_price': european.u0,
        'european_stderr': european.stderr,
        'early_exercise_premium': american.u0 - european.u0,
        'exercise_boundary_samples': exercise_boundary(american, bundle, rank) if spec.has_obstacle else [],
        'oracle_price': oracle,
        'bond_value_T': market.bond_value(market.T),
        'diagnostics': {
            # ranked dollar-volatility positions pi_j = Zbar_j and consumption C = K
            'hedge_t0': american.Zbar[:, 0].mean(axis=0).tolist(),
            'consumption_mean_T': float(american.K[:, -1].mean()),
            'log_drift': list(profile.delta),
            'solver': american.diagnostics,
            'validation': report,
            'collisions': bundle.diagnostics.get('collisions'),
        },
    }
    if oracle is not None:
        result['oracle_relative_gap'] = abs(american.u0 - oracle) / oracle if oracle else None
    logger.info('American price %.6g +/- %.2g (European %.6g, oracle %s)', american.u0,
                american.stderr, european.u0, 'n/a' if oracle is None else f'{oracle:.6g}')
    return result
