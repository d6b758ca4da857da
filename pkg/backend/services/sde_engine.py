# services/sde_engine.py
"""
Euler-Maruyama simulation of the rank-based particle system.

Each particle takes the drift and volatility of the rank it holds at the start
of the step. Paths are simulated in fixed-size blocks, each path drawing from
its own counter-based stream, so the output never depends on how many worker
threads process the blocks.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, List

import numpy as np
from scipy.special import softmax

from config import Config
from models.coefficient_profile import CoefficientProfile, concavity_violations
from models.path_bundle import PathBundle, TimeGrid
from models.rank_view import SimplexPoint, inverse_permutation, rank_order
from utils.decorators import timed
from utils.error_handlers import SpecRejectedError, ValidationError
from utils.logging_config import get_logger
from utils.rng import path_normals

logger = get_logger(__name__)

# (X_k, order_k) -> (drift, volatility), both (M, n) in named coordinates
CoefficientRule = Callable[[np.ndarray, np.ndarray], tuple]


def _as_simplex_point(x0) -> SimplexPoint:
    return x0 if isinstance(x0, SimplexPoint) else SimplexPoint.from_coords(x0)


def _check_inputs(profile: CoefficientProfile, x0: SimplexPoint, n_paths: int,
                  allow_nonconcave: bool) -> None:
    if x0.n != profile.n:
        raise ValidationError(f'x0 has {x0.n} coordinates but the profile has n={profile.n}')
    if n_paths < 1:
        raise ValidationError('n_paths must be >= 1')
    if not profile.is_concave:
        if not allow_nonconcave:
            ranks = concavity_violations(profile.sigma_array ** 2)
            raise SpecRejectedError(f'sigma^2 is not concave at ranks {ranks}; triple collisions are not '
                                    'excluded. Set allow_nonconcave to simulate anyway',
                                    report={'valid': False, 'errors': ['concavity'], 'violations': ranks})
        logger.warning('Simulating a non-concave profile sigma=%s under override', list(profile.sigma))


def rank_rule(profile: CoefficientProfile) -> CoefficientRule:
    """Exact indicator coefficients: particle i uses delta/sigma of its current rank."""
    delta = profile.delta_array
    sigma = profile.sigma_array

    def rule(X, order):
        perm = inverse_permutation(order)
        return delta[perm], sigma[perm]
    return rule


def softmin_rule(profile: CoefficientProfile, smoothing: float) -> CoefficientRule:
    """Weights w_ij proportional to exp(-m |X_i - X_(j)|), normalised over ranks j."""
    delta = profile.delta_array
    sigma = profile.sigma_array

    def rule(X, order):
        ranked = np.take_along_axis(X, order, axis=-1)
        distance = np.abs(X[:, :, None] - ranked[:, None, :])
        weights = softmax(-smoothing * distance, axis=-1)
        return weights @ delta, weights @ sigma
    return rule


def evolve(x0: np.ndarray, dW: np.ndarray, dt: float, rule: CoefficientRule) -> Dict[str, np.ndarray]:
    """Run the scheme on given increments dW (M, N, n) from the named state x0."""
    M, N, n = dW.shape
    X = np.empty((M, N + 1, n))
    order = np.empty((M, N + 1, n), dtype=np.intp)
    X[:, 0, :] = x0
    for k in range(N):
        order[:, k] = rank_order(X[:, k])
        drift, vol = rule(X[:, k], order[:, k])
        X[:, k + 1] = X[:, k] + drift * dt + vol * dW[:, k]
    order[:, N] = rank_order(X[:, N])
    ranked = np.take_along_axis(X, order, axis=-1)
    dbeta = np.take_along_axis(dW, order[:, :N], axis=-1)
    return {'X': X, 'ranked': ranked, 'order': order, 'dbeta': dbeta}


def _blocks(n_paths: int, block_size: int):
    return [(start, min(start + block_size, n_paths)) for start in range(0, n_paths, block_size)]


def _draw_increments(seed: int, n_paths: int, grid: TimeGrid, n: int, threads: int,
                     block_size: int) -> np.ndarray:
    scale = np.sqrt(grid.dt)

    def draw(block):
        start, stop = block
        return path_normals(seed, start, stop, (grid.steps, n)) * scale

    blocks = _blocks(n_paths, block_size)
    if threads <= 1 or len(blocks) == 1:
        parts = [draw(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(draw, blocks))
    return np.concatenate(parts, axis=0)


def _run(x0: SimplexPoint, dW: np.ndarray, grid: TimeGrid, rule: CoefficientRule, seed: int,
         threads: int, block_size: int, diagnostics: Dict) -> PathBundle:
    blocks = _blocks(dW.shape[0], block_size)

    def work(block):
        start, stop = block
        return evolve(x0.coords, dW[start:stop], grid.dt, rule)

    if threads <= 1 or len(blocks) == 1:
        parts = [work(b) for b in blocks]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(work, blocks))

    merged = {key: np.concatenate([p[key] for p in parts], axis=0) for key in parts[0]}
    bundle = PathBundle(grid=grid, X=merged['X'], ranked=merged['ranked'], order=merged['order'],
                        dW=dW, dbeta=merged['dbeta'], seed=int(seed), diagnostics=dict(diagnostics))
    stats = bundle.collision_statistics()
    bundle.diagnostics['collisions'] = stats
    if diagnostics.get('nonconcave_override') and stats['triple_proximity_fraction'] > 0:
        logger.warning('Triple-proximity fraction %.4g under the non-concave override',
                       stats['triple_proximity_fraction'])
    return bundle


class SDEEngine:
    """Simulation entry points sharing a worker count and block size"""

    def __init__(self, threads: int = Config.DEFAULT_THREADS, block_size: int = Config.PATH_BLOCK_SIZE):
        if threads < 1 or block_size < 1:
            raise ValidationError('threads and block_size must be >= 1')
        self.threads = int(threads)
        self.block_size = int(block_size)

    @timed('simulate')
    def simulate(self, profile: CoefficientProfile, x0, grid: TimeGrid, n_paths: int, seed: int,
                 allow_nonconcave: bool = False) -> PathBundle:
        x0 = _as_simplex_point(x0)
        _check_inputs(profile, x0, n_paths, allow_nonconcave)
        logger.info('Simulating %d paths, n=%d, %d steps, seed=%d', n_paths, profile.n, grid.steps, seed)
        dW = _draw_increments(seed, n_paths, grid, profile.n, self.threads, self.block_size)
        return _run(x0, dW, grid, rank_rule(profile), seed, self.threads, self.block_size,
                    {'scheme': 'rank', 'nonconcave_override': not profile.is_concave})

    @timed('smoothed_simulate')
    def smoothed_simulate(self, profile: CoefficientProfile, x0, grid: TimeGrid, n_paths: int,
                          seed: int, smoothing: float, allow_nonconcave: bool = False) -> PathBundle:
        if not smoothing > 0:
            raise ValidationError(f'Smoothing parameter must be positive, got {smoothing}')
        x0 = _as_simplex_point(x0)
        _check_inputs(profile, x0, n_paths, allow_nonconcave)
        dW = _draw_increments(seed, n_paths, grid, profile.n, self.threads, self.block_size)
        rule = rank_rule(profile) if profile.n == 1 else softmin_rule(profile, smoothing)
        return _run(x0, dW, grid, rule, seed, self.threads, self.block_size,
                    {'scheme': 'softmin', 'smoothing': float(smoothing),
                     'nonconcave_override': not profile.is_concave})

    @timed('simulate_nested')
    def simulate_nested(self, profile: CoefficientProfile, x0, grid: TimeGrid, n_paths: int,
                        seed: int, levels: int, allow_nonconcave: bool = False) -> List[PathBundle]:
        """Bundles on grid.steps / 2^l steps for l = levels-1..0, coarsest first.

        Coarse increments are sums of the finest ones, so every level sees the
        same Brownian paths.
        """
        x0 = _as_simplex_point(x0)
        _check_inputs(profile, x0, n_paths, allow_nonconcave)
        factor = 2 ** (levels - 1)
        if levels < 1 or grid.steps % factor:
            raise ValidationError(f'{grid.steps} steps cannot be halved {levels - 1} times')
        fine = _draw_increments(seed, n_paths, grid, profile.n, self.threads, self.block_size)
        bundles = []
        for level in reversed(range(levels)):
            width = 2 ** level
            coarse = TimeGrid(grid.t0, grid.T, grid.steps // width)
            dW = fine.reshape(n_paths, coarse.steps, width, profile.n).sum(axis=2) if width > 1 else fine
            bundles.append(_run(x0, dW, coarse, rank_rule(profile), seed, self.threads, self.block_size,
                                {'scheme': 'rank', 'nested_width': width,
                                 'nonconcave_override': not profile.is_concave}))
        return bundles


def simulate(profile: CoefficientProfile, x0, grid: TimeGrid, n_paths: int, seed: int,
             allow_nonconcave: bool = False, threads: int = Config.DEFAULT_THREADS,
             block_size: int = Config.PATH_BLOCK_SIZE) -> PathBundle:
    return SDEEngine(threads, block_size).simulate(profile, x0, grid, n_paths, seed, allow_nonconcave)


def smoothed_simulate(profile: CoefficientProfile, x0, grid: TimeGrid, n_paths: int, seed: int,
                      smoothing: float, allow_nonconcave: bool = False,
                      threads: int = Config.DEFAULT_THREADS,
                      block_size: int = Config.PATH_BLOCK_SIZE) -> PathBundle:
    return SDEEngine(threads, block_size).smoothed_simulate(profile, x0, grid, n_paths, seed,
                                                            smoothing, allow_nonconcave)


def simulate_nested(profile: CoefficientProfile, x0, grid: TimeGrid, n_paths: int, seed: int,
                    levels: int, allow_nonconcave: bool = False, threads: int = Config.DEFAULT_THREADS,
                    block_size: int = Config.PATH_BLOCK_SIZE) -> List[PathBundle]:
    return SDEEngine(threads, block_size).simulate_nested(profile, x0, grid, n_paths, seed, levels,
                                                          allow_nonconcave)


def estimate_local_times(bundle: PathBundle, profile: CoefficientProfile) -> PathBundle:
    """Recover Lambda^{j,j+1} by inverting the ranked decomposition step by step.

    R_j = dX_(j) - delta_j dt - sigma_j dbeta_j; dLambda^{1,2} = 2 R_1 and
    dLambda^{j,j+1} = 2 R_j + dLambda^{j-1,j}. Negative increments are clipped.
    """
    n = bundle.n
    if n == 1:
        return bundle
    dt = bundle.grid.dt
    residual = (np.diff(bundle.ranked, axis=1) - profile.delta_array * dt
                - profile.sigma_array * bundle.dbeta)
    raw = 2.0 * np.cumsum(residual[..., :n - 1], axis=-1)
    clipped = np.maximum(raw, 0.0)
    clipped_mass = float(np.sum(clipped - raw))

    local_time = np.zeros(bundle.ranked.shape[:2] + (n - 1,))
    np.cumsum(clipped, axis=1, out=local_time[:, 1:, :])

    # the last ranked equation closes the system: R_n = -dLambda^{n-1,n} / 2
    closure = residual[..., n - 1] + 0.5 * raw[..., n - 2]
    diagnostics = {
        'local_time': {
            'clipped_mass': clipped_mass,
            'clipped_mass_per_path': clipped_mass / bundle.n_paths,
            'clipped_fraction': float(np.mean(raw < 0.0)),
            'closure_residual_max': float(np.max(np.abs(closure))) if closure.size else 0.0,
            'mean_terminal': local_time[:, -1, :].mean(axis=0).tolist(),
        }
    }
    if clipped_mass > 0:
        logger.warning('Local-time recovery clipped %.4g of negative mass over %d paths',
                       clipped_mass, bundle.n_paths)
    return bundle.with_local_time(local_time, diagnostics)


def ranked_brownian_diagnostics(bundle: PathBundle) -> Dict:
    """Discrete quadratic covariation sum_k dbeta_j dbeta_l over the horizon."""
    qv = np.einsum('mkj,mkl->mjl', bundle.dbeta, bundle.dbeta)
    M = bundle.n_paths
    mean = qv.mean(axis=0)
    stderr = qv.std(axis=0, ddof=1) / np.sqrt(M) if M > 1 else np.zeros_like(mean)
    horizon = bundle.grid.T - bundle.grid.t0
    diagonal = np.diag(mean)
    return {
        'horizon': horizon,
        'mean_qv': mean.tolist(),
        'stderr_qv': stderr.tolist(),
        'diagonal_relative_error': (np.abs(diagonal - horizon) / horizon).tolist() if horizon > 0 else None,
        'offdiagonal_z_scores': [
            [float(mean[j, l] / stderr[j, l]) if j != l and stderr[j, l] > 0 else 0.0
             for l in range(bundle.n)] for j in range(bundle.n)
        ],
        'n_paths': M,
    }


def moment_ratio(bundle: PathBundle, x0) -> float:
    """E[sup_k |X(t_k)|^2] / (1 + |x0|^2)."""
    sup_sq = np.max(np.sum(bundle.X ** 2, axis=-1), axis=1)
    return float(np.mean(sup_sq) / (1.0 + float(np.sum(np.asarray(x0, dtype=float) ** 2))))


def sup_distance(first: PathBundle, second: PathBundle, power: float = 1.0) -> float:
    """E[sup_k |X^a(t_k) - X^b(t_k)|^power] between matched bundles on one grid."""
    if first.X.shape != second.X.shape:
        raise ValidationError('Bundles must share paths and grid for a matched comparison')
    distance = np.linalg.norm(first.X - second.X, axis=-1)
    return float(np.mean(np.max(distance, axis=1) ** power))


def strong_error(coarse: PathBundle, fine: PathBundle) -> float:
    """E[max_k |X_coarse(t_k) - X_fine(t_k)|] on the coarse grid points."""
    factor = fine.grid.steps // coarse.grid.steps
    if factor * coarse.grid.steps != fine.grid.steps or coarse.n_paths != fine.n_paths:
        raise ValidationError('Strong error needs nested grids with matched paths')
    distance = np.linalg.norm(coarse.X - fine.X[:, ::factor], axis=-1)
    return float(np.mean(np.max(distance, axis=1)))
