# services/bsde_solver.py
"""
Backward solvers on a simulated bundle, in ranked coordinates.

One sweep serves all three problems. Every path carries a realised cash flow
C backwards from C_N = g. At step k the continuation value and Zbar are
regressed on C_{k+1}, the generator step is solved implicitly in y (every
built-in generator is affine in y, the penalty term is piecewise affine) and
applied pathwise to C.

Obstacles enter through stopping decisions in the Longstaff-Schwartz manner:
the continuation is refitted on the paths where stopping is a candidate
(obstacle strictly positive when the obstacle is non-negative), and a path
stops where h_k is at least that fit; its cash flow becomes h_k. The
penalised solver stops the same paths with weight m dt / (1 - b dt + m dt),
which tends to full stopping as m grows. u0 and its standard error come from
the stopped cash flows. Y = max(continuation step, h) and the projection
residual dK are the regression value estimates behind the diagnostics. The
sentinel obstacle -inf never binds, so the plain BSDE is the reflected one
with K = 0.
"""

from typing import Optional, Tuple

import numpy as np

from config import Config
from models.coefficient_profile import CoefficientProfile
from models.path_bundle import PathBundle, TimeGrid
from models.problem_spec import ProblemSpec
from models.rank_view import SimplexPoint
from models.solutions import ReflectedSolution
from services.regression import RegressionBasis
from services.sde_engine import SDEEngine
from utils.decorators import timed
from utils.error_handlers import NumericsError, ValidationError
from utils.logging_config import get_logger

logger = get_logger(__name__)


def _check_step(spec: ProblemSpec, dt: float) -> None:
    """Reject c dt >= 1; for the pricing generator c = sup|r| + ||theta||_2 (Euclidean norm in z)."""
    c = spec.generator.lipschitz_constant()
    if c * dt >= 1.0:
        raise NumericsError(f'Step size rejected: c*dt = {c * dt:.4g} >= 1 (c={c:.4g}, dt={dt:.4g})',
                            details={'lipschitz_constant': c, 'dt': dt, 'max_dt': 1.0 / c})


def _implicit_step(cont, alpha, b, dt, h=None, penalty=0.0):
    """Solve y = cont + dt (alpha + b y + m (h - y)^+) exactly.

    The upper branch applies where its solution stays above h; otherwise the
    penalised branch is affine with slope b - m.
    """
    y = (cont + dt * alpha) / (1.0 - dt * b)
    if penalty == 0.0 or h is None:
        return y
    finite = np.isfinite(h)
    if not np.any(finite):
        return y
    h_safe = np.where(finite, h, 0.0)
    lower = (cont + dt * alpha + dt * penalty * h_safe) / (1.0 - dt * b + dt * penalty)
    return np.where(finite & (y < h_safe), lower, y)


def _degenerate_solution(bundle: PathBundle, spec: ProblemSpec) -> ReflectedSolution:
    """Zero-length horizon: Y = g(x0) on every path."""
    M, n = bundle.n_paths, bundle.n
    terminal = spec.terminal(bundle.ranked[:, -1])
    Y = np.repeat(terminal[:, None], bundle.grid.steps + 1, axis=1)
    zeros = np.zeros((M, bundle.grid.steps + 1))
    return ReflectedSolution(grid=bundle.grid, Y=Y, Zbar=np.zeros((M, bundle.grid.steps, n)),
                             K=zeros, dK=np.zeros((M, bundle.grid.steps)),
                             u0=float(terminal[0]), stderr=0.0,
                             diagnostics={'degenerate_horizon': True})


def _stopping_candidates(h: np.ndarray) -> np.ndarray:
    """Paths on which stopping is considered at one step.

    A non-negative obstacle is worthless where it is zero, so only the paths
    where it is strictly positive take part (all of them if none is).
    """
    finite = np.isfinite(h)
    if not np.any(finite):
        return finite
    positive = finite & (h > 0.0)
    if np.all(h[finite] >= 0.0) and np.any(positive):
        return positive
    return finite


def _sweep(bundle: PathBundle, spec: ProblemSpec, basis: RegressionBasis, penalty: float = 0.0,
           project: bool = True) -> ReflectedSolution:
    grid = bundle.grid
    if grid.degenerate:
        return _degenerate_solution(bundle, spec)
    M, N, n = bundle.n_paths, grid.steps, bundle.n
    dt = grid.dt
    times = grid.times
    _check_step(spec, dt)
    basis.reset()

    X = bundle.ranked
    dbeta = bundle.dbeta
    generator = spec.generator
    obstacle = spec.obstacle
    stopping = project or penalty > 0.0

    Y = np.empty((M, N + 1))
    Zbar = np.zeros((M, N, n))
    dK = np.zeros((M, N))
    H = np.empty((M, N + 1))
    F = np.zeros((M, N))
    stopped = np.zeros((M, N), dtype=bool)
    conditions = np.ones(N)

    Y[:, N] = spec.terminal(X[:, N])
    H[:, N] = obstacle(times[N], X[:, N])
    G = spec.terminal(X[:, :N]) if basis.use_terminal else None
    C = Y[:, N].copy()

    for k in range(N - 1, -1, -1):
        t = times[k]
        H[:, k] = obstacle(t, X[:, k])
        g_k = G[:, k] if G is not None else None
        cont_fit = basis.fit(X[:, k], C, H[:, k], g_k, step=k)
        cont = cont_fit.fitted
        martingale = (C - cont)[:, None] * dbeta[:, k]
        Zbar[:, k] = basis.fit(X[:, k], martingale / dt, H[:, k], g_k, step=k).fitted
        conditions[k] = cont_fit.condition_number

        alpha = generator.intercept(t, X[:, k], Zbar[:, k])
        b = generator.y_coefficient(t)
        y = _implicit_step(cont, alpha, b, dt, H[:, k], penalty)
        F[:, k] = alpha + b * y
        if penalty > 0.0:
            F[:, k] += penalty * np.where(np.isfinite(H[:, k]), np.maximum(H[:, k] - y, 0.0), 0.0)
        if project:
            Y[:, k] = np.maximum(y, H[:, k])
            dK[:, k] = Y[:, k] - y
        else:
            Y[:, k] = y

        carried = (C + dt * alpha) / (1.0 - dt * b)
        candidates = _stopping_candidates(H[:, k]) if stopping else np.zeros(M, dtype=bool)
        if np.any(candidates):
            in_money = basis.fit(X[:, k], C, H[:, k], g_k, step=k, mask=candidates).fitted
            continuation = (in_money + dt * alpha) / (1.0 - dt * b)
            if project:
                stopped[:, k] = candidates & (H[:, k] >= continuation)
                weight = 1.0
            else:
                stopped[:, k] = candidates & (H[:, k] > continuation)
                weight = dt * penalty / (1.0 - dt * b + dt * penalty)
            h_safe = np.where(candidates, H[:, k], 0.0)
            C = np.where(stopped[:, k], (1.0 - weight) * carried + weight * h_safe, carried)
        else:
            C = carried

    K = np.zeros((M, N + 1))
    np.cumsum(dK, axis=1, out=K[:, 1:])

    u0 = float(np.mean(C))
    stderr = float(np.std(C, ddof=1) / np.sqrt(M)) if M > 1 else 0.0

    finite = np.isfinite(H)
    slack = np.where(finite, Y - H, 0.0)
    pushes = dK > 0
    step_sums = np.where(pushes, 0.5 * (slack[:, :N] + slack[:, 1:]) * dK, 0.0).mean(axis=0)
    violation = np.where(finite, H - Y, 0.0)

    steps = []
    partial = 0.0
    for k in range(N + 1):
        if k < N:
            partial += float(step_sums[k])
        steps.append({'step': k, 't': float(times[k]), 'mean_Y': float(Y[:, k].mean()),
                      'mean_dK': float(dK[:, k].mean()) if k < N else 0.0,
                      'skorokhod_partial_sum': partial,
                      'condition_number': float(conditions[k]) if k < N else 1.0})

    diagnostics = {
        'max_obstacle_violation': float(max(np.max(violation), 0.0)) if project else None,
        'skorokhod_sum': float(np.sum(step_sums)),
        'skorokhod_node_sum': float(np.where(pushes, slack[:, :N] * dK, 0.0).sum(axis=1).mean()),
        'mean_K_T': float(K[:, N].mean()),
        'K_nondecreasing': bool(np.all(np.diff(K, axis=1) >= 0.0)),
        'terminal_exact': True,
        'l2_sup_Y': float(np.mean(np.max(Y ** 2, axis=1))),
        'l2_Z': float(np.mean(np.sum(Zbar ** 2, axis=(1, 2)) * dt)),
        'regression': {'basis': basis.describe(), 'fallbacks': basis.fallbacks,
                       'max_condition_number': float(np.max(conditions))},
        'penalty': float(penalty),
        'stopped_fraction': float(stopped.mean()) if N else 0.0,
        'local_time': bundle.diagnostics.get('local_time'),
    }
    return ReflectedSolution(grid=grid, Y=Y, Zbar=Zbar, K=K, dK=dK, u0=u0, stderr=stderr,
                             diagnostics=diagnostics, steps=steps, stopped=stopped)


@timed('solve_bsde')
def solve_bsde(bundle: PathBundle, spec: ProblemSpec, basis: RegressionBasis) -> ReflectedSolution:
    """Plain BSDE; the obstacle must be the never-binding sentinel."""
    if spec.has_obstacle:
        raise ValidationError("solve_bsde needs the sentinel obstacle {'kind': 'none'}; "
                              "use solve_reflected or solve_penalized")
    solution = _sweep(bundle, spec, basis)
    logger.info('BSDE u0=%.6g +/- %.2g on %d paths', solution.u0, solution.stderr, bundle.n_paths)
    return solution


@timed('solve_reflected')
def solve_reflected(bundle: PathBundle, spec: ProblemSpec, basis: RegressionBasis) -> ReflectedSolution:
    """Discrete Snell envelope: Y_k = max(continuation step, h_k), dK = projection residual."""
    solution = _sweep(bundle, spec, basis)
    logger.info('Reflected u0=%.6g +/- %.2g, Skorokhod sum %.3g', solution.u0, solution.stderr,
                solution.diagnostics.get('skorokhod_sum', 0.0))
    return solution


@timed('solve_penalized')
def solve_penalized(bundle: PathBundle, spec: ProblemSpec, basis: RegressionBasis,
                    m: float) -> ReflectedSolution:
    """BSDE with generator F + m (y - h)^-; K stays 0 and the push lives in F."""
    if not np.isfinite(m) or m < 0:
        raise ValidationError(f'Penalty must be a non-negative finite number, got {m}')
    solution = _sweep(bundle, spec, basis, penalty=float(m), project=False)
    logger.info('Penalised (m=%g) u0=%.6g +/- %.2g', m, solution.u0, solution.stderr)
    return solution


def named_controls(solution: ReflectedSolution, bundle: PathBundle) -> Tuple[np.ndarray, np.ndarray]:
    """Named Z from Zbar through each step's rank permutation, with tie-step flags.

    Returns (Z (M, N, n), ties (M, N)); at flagged steps the named split
    depends on the lowest-index tie rule.
    """
    N = solution.grid.steps
    perm = bundle.perm[:, :N]
    Z = np.take_along_axis(solution.Zbar, perm, axis=-1)
    ties = np.any(bundle.gaps()[:, :N] == 0.0, axis=-1) if bundle.n > 1 else np.zeros(Z.shape[:2], bool)
    return Z, ties


def make_basis(degree: int = Config.DEFAULT_BASIS_DEGREE, split_sample: bool = False) -> RegressionBasis:
    return RegressionBasis(degree=degree, split_sample=split_sample)


def estimate_solution(profile: CoefficientProfile, spec: ProblemSpec, x0, t0: float, T: float,
                      numerics, mode: str = 'reflected', penalty: float = 0.0,
                      block_size: int = Config.PATH_BLOCK_SIZE) -> Tuple[ReflectedSolution, Optional[PathBundle]]:
    """simulate + backward solve; returns the solution and the bundle it ran on."""
    x0 = x0 if isinstance(x0, SimplexPoint) else SimplexPoint.from_coords(x0)
    if T == t0:
        value = float(spec.terminal(x0.coords))
        grid = TimeGrid(t0, T, 1)
        one = np.full((1, 2), value)
        solution = ReflectedSolution(grid=grid, Y=one, Zbar=np.zeros((1, 1, x0.n)), K=np.zeros((1, 2)),
                                     dK=np.zeros((1, 1)), u0=value, stderr=0.0,
                                     diagnostics={'degenerate_horizon': True})
        return solution, None

    grid = TimeGrid(t0, T, numerics.time_steps)
    engine = SDEEngine(threads=numerics.threads, block_size=block_size)
    bundle = engine.simulate(profile, x0, grid, numerics.n_paths, numerics.seed,
                             allow_nonconcave=numerics.allow_nonconcave)
    basis = make_basis(numerics.basis_degree, numerics.split_sample)
    if mode == 'penalized':
        return solve_penalized(bundle, spec, basis, penalty), bundle
    if mode == 'bsde':
        return solve_bsde(bundle, spec, basis), bundle
    return solve_reflected(bundle, spec, basis), bundle


def estimate_u(profile: CoefficientProfile, spec: ProblemSpec, x0, t0: float, T: float,
               numerics) -> Tuple[float, float]:
    """u(t0, x0) = Y(t0) with its Monte Carlo standard error."""
    solution, _ = estimate_solution(profile, spec, x0, t0, T, numerics)
    return solution.u0, solution.stderr
