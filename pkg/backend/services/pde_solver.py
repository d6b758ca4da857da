# services/pde_solver.py
"""
Finite differences for the obstacle problem on the truncated ordered domain.

Work happens in xi = J x (sum, gaps). The operator becomes
    1/2 sum_a A_aa d_aa + sum_{a<b} A_ab d_ab + (J delta) . grad,   A = J diag(sigma^2) J^T,
and the face condition d_{x_{i+1}} u = d_{x_i} u turns into c . grad_xi u = 0
at gap_i = 0 with c = J (e_{i+1} - e_i). Ghost nodes below a face are
reflections corrected by the tangential part of c; outer truncation
boundaries extrapolate linearly.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import splu

from models.coefficient_profile import CoefficientProfile
from models.problem_spec import ProblemSpec
from models.simplex_grid import SimplexGrid
from models.solutions import GridSolution
from utils.decorators import timed
from utils.error_handlers import NumericsError, ValidationError
from utils.logging_config import get_logger

logger = get_logger(__name__)

PSOR_OMEGA = 1.2
PSOR_TOL = 1e-10
PSOR_MAX_ITER = 20000


@dataclass
class DiscreteOperator:
    """Sparse generator on the grid nodes (C order) with its coefficients"""

    matrix: sparse.csr_matrix
    diffusion: np.ndarray
    drift: np.ndarray
    grid: SimplexGrid
    mesh_ratios: Dict = field(default_factory=dict)
    peclet_ok: bool = True

    def apply(self, values: np.ndarray) -> np.ndarray:
        """L u for u shaped like the grid."""
        return (self.matrix @ np.asarray(values, dtype=float).ravel()).reshape(self.grid.shape)


def face_normals(n: int) -> Dict[int, np.ndarray]:
    """c = J (e_{a} - e_{a-1}) for every gap axis a (ranks 0-based)."""
    J = np.zeros((n, n))
    J[0, :] = 1.0
    for i in range(n - 1):
        J[i + 1, i], J[i + 1, i + 1] = 1.0, -1.0
    normals = {}
    for a in range(1, n):
        e = np.zeros(n)
        e[a], e[a - 1] = 1.0, -1.0
        normals[a] = J @ e
    return normals


def _check_mesh_ratios(A: np.ndarray, spacings: Sequence[float]) -> Dict:
    """Weak diagonal dominance of the cross stencil: h_b/h_a in [|A_ab|/A_aa, A_bb/|A_ab|]."""
    ratios = {}
    d = len(spacings)
    for a in range(d):
        for b in range(a + 1, d):
            if A[a, b] == 0.0:
                continue
            low, high = abs(A[a, b]) / A[a, a], A[b, b] / abs(A[a, b])
            ratio = spacings[b] / spacings[a]
            ratios[f'{a},{b}'] = {'ratio': ratio, 'admissible': [low, high]}
            if not low * (1 - 1e-12) <= ratio <= high * (1 + 1e-12):
                raise NumericsError(
                    f'Mesh ratio h_{b}/h_{a} = {ratio:.4g} breaks diagonal dominance of the cross '
                    f'derivative; admissible range [{low:.4g}, {high:.4g}]',
                    details={'axes': [a, b], 'ratio': ratio, 'admissible': [low, high]})
    return ratios


class _GhostResolver:
    """Expresses out-of-range stencil nodes as combinations of grid nodes."""

    def __init__(self, grid: SimplexGrid):
        self.shape = np.array(grid.shape)
        self.spacings = grid.spacings
        self.gap_axes = set(grid.gap_axes)
        normals = face_normals(grid.n)
        # d_a u = sum_b q_b d_b u on face a
        self.tangential = {a: {b: -c[b] / c[a] for b in range(grid.n) if b != a and c[b] != 0.0}
                           for a, c in normals.items()}

    def resolve(self, idx: np.ndarray, weights: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        done_idx, done_w = [], []
        pending = [(idx, weights)]
        while pending:
            idx, w = pending.pop()
            if idx.shape[0] == 0:
                continue
            bad = (idx < 0) | (idx >= self.shape)
            inside = ~bad.any(axis=1)
            done_idx.append(idx[inside])
            done_w.append(w[inside])
            if inside.all():
                continue
            idx, w, bad = idx[~inside], w[~inside], bad[~inside]
            first = np.argmax(bad, axis=1)
            for a in range(idx.shape[1]):
                sel = first == a
                if np.any(sel):
                    pending.extend(self._ghost(a, idx[sel], w[sel]))
        flat_idx = np.concatenate(done_idx) if done_idx else np.zeros((0, len(self.shape)), int)
        return flat_idx, np.concatenate(done_w) if done_w else np.zeros(0)

    def _ghost(self, a: int, idx: np.ndarray, w: np.ndarray):
        last = self.shape[a] - 1
        low = idx[:, a] < 0
        out = []
        if np.any(~low):
            # linear extrapolation past the upper boundary
            I, W = idx[~low], w[~low]
            out.append((_with(I, a, last), 2.0 * W))
            out.append((_with(I, a, last - 1), -W))
        if np.any(low):
            I, W = idx[low], w[low]
            if a not in self.gap_axes:
                out.append((_with(I, a, 0), 2.0 * W))
                out.append((_with(I, a, 1), -W))
            else:
                # u(-h_a) = u(h_a) - 2 h_a sum_b q_b d_b u at the face node
                out.append((_with(I, a, 1), W))
                face = _with(I, a, 0)
                for b, q in self.tangential[a].items():
                    scale = -2.0 * self.spacings[a] * q * W
                    out.extend(self._tangential(face, b, scale))
        return out

    def _tangential(self, face: np.ndarray, b: int, scale: np.ndarray):
        """Stencil of d_b at the face nodes; corners (another face at 0) contribute nothing."""
        h = self.spacings[b]
        last = self.shape[b] - 1
        pos = np.clip(face[:, b], 0, last)
        out = []
        corner = (pos == 0) & (b in self.gap_axes)
        central = (pos > 0) & (pos < last)
        upper = pos == last
        lower = (pos == 0) & ~corner
        base = _with(face, b, 0)
        if np.any(central):
            base_c, s = base[central], scale[central]
            out.append((_with(base_c, b, pos[central] + 1), s / (2 * h)))
            out.append((_with(base_c, b, pos[central] - 1), -s / (2 * h)))
        if np.any(upper):
            base_u, s = base[upper], scale[upper]
            out.append((_with(base_u, b, last), s / h))
            out.append((_with(base_u, b, last - 1), -s / h))
        if np.any(lower):
            base_l, s = base[lower], scale[lower]
            out.append((_with(base_l, b, 1), s / h))
            out.append((_with(base_l, b, 0), -s / h))
        return out


def _with(idx: np.ndarray, axis: int, value) -> np.ndarray:
    out = idx.copy()
    out[:, axis] = value
    return out


@timed('assemble_operator')
def assemble_operator(profile: CoefficientProfile, grid: SimplexGrid) -> DiscreteOperator:
    """Central differences with the 4-point cross stencil and ghost closures."""
    if profile.n != grid.n:
        raise ValidationError(f'Profile has n={profile.n} but the grid has n={grid.n}')
    J = grid.J
    A = J @ np.diag(profile.sigma_array ** 2) @ J.T
    mu = J @ profile.delta_array
    h = grid.spacings
    d = grid.n
    mesh_ratios = _check_mesh_ratios(A, h)

    peclet_ok = True
    for a in range(d):
        if abs(mu[a]) * h[a] > A[a, a]:
            peclet_ok = False
            logger.warning('Cell Peclet number on axis %s is %.3g > 1; central drift differences '
                           'lose monotonicity', grid.names[a], abs(mu[a]) * h[a] / A[a, a])

    stencil: Dict[Tuple[int, ...], float] = {}

    def add(offset, value):
        stencil[offset] = stencil.get(offset, 0.0) + value

    zero = (0,) * d
    for a in range(d):
        plus = tuple(1 if i == a else 0 for i in range(d))
        minus = tuple(-1 if i == a else 0 for i in range(d))
        diff2 = 0.5 * A[a, a] / h[a] ** 2
        add(plus, diff2 + mu[a] / (2 * h[a]))
        add(minus, diff2 - mu[a] / (2 * h[a]))
        add(zero, -2.0 * diff2)
        for b in range(a + 1, d):
            if A[a, b] == 0.0:
                continue
            cross = A[a, b] / (4 * h[a] * h[b])
            for sa in (1, -1):
                for sb in (1, -1):
                    offset = tuple(sa if i == a else (sb if i == b else 0) for i in range(d))
                    add(offset, sa * sb * cross)

    nodes = np.indices(grid.shape).reshape(d, -1).T
    resolver = _GhostResolver(grid)
    rows, cols, vals = [], [], []
    for offset, value in stencil.items():
        if value == 0.0:
            continue
        target = nodes + np.array(offset)
        source = np.arange(nodes.shape[0])
        # tag each entry with its row through an extra trailing column
        tagged_w = np.full(nodes.shape[0], value)
        idx, w = _resolve_rows(resolver, target, tagged_w, source)
        rows.append(idx[1])
        cols.append(np.ravel_multi_index(idx[0].T, grid.shape))
        vals.append(w)
    matrix = sparse.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                               shape=(grid.size, grid.size))
    matrix.sum_duplicates()
    logger.info('Assembled operator: n=%d, %d nodes, %d non-zeros', d, grid.size, matrix.nnz)
    return DiscreteOperator(matrix=matrix, diffusion=A, drift=mu, grid=grid,
                            mesh_ratios=mesh_ratios, peclet_ok=peclet_ok)


def _resolve_rows(resolver: _GhostResolver, target: np.ndarray, weights: np.ndarray,
                  rows: np.ndarray):
    """resolve() while carrying the owning row of every entry along."""
    # the row id rides in an extra column the resolver never inspects as out of range
    d = target.shape[1]
    shape = resolver.shape
    resolver.shape = np.concatenate([shape, [np.iinfo(np.int64).max]])
    try:
        idx, w = resolver.resolve(np.column_stack([target, rows]), weights)
    finally:
        resolver.shape = shape
    return (idx[:, :d], idx[:, d]), w


def _gradient(values: np.ndarray, spacings: Sequence[float]) -> List[np.ndarray]:
    grads = np.gradient(values, *spacings)
    return [grads] if values.ndim == 1 else list(grads)


def boundary_face_residual(values: np.ndarray, grid: SimplexGrid) -> float:
    """max over face nodes of |(u_1 - u_0)/h_a - sum_b q_b d_b u|, the face condition
    divided by c_a; nodes on outer truncation boundaries are excluded."""
    if grid.n == 1:
        return 0.0
    grads = _gradient(values, grid.spacings)
    worst = 0.0
    normals = face_normals(grid.n)
    for a in grid.gap_axes:
        c = normals[a]
        first = np.take(values, 0, axis=a)
        second = np.take(values, 1, axis=a)
        one_sided = (second - first) / grid.spacings[a]
        tangential = np.zeros_like(one_sided)
        for b in range(grid.n):
            if b != a and c[b] != 0.0:
                tangential += -c[b] / c[a] * np.take(grads[b], 0, axis=a)
        residual = np.abs(one_sided - tangential)
        interior = tuple(slice(1, -1) for _ in range(residual.ndim))
        if residual[interior].size:
            worst = max(worst, float(np.max(residual[interior])))
    return worst


def _psor(A: sparse.csr_matrix, rhs: np.ndarray, lower: np.ndarray, start: np.ndarray) -> Tuple[np.ndarray, int]:
    """Projected SOR for A u >= rhs, u >= lower, complementary."""
    u = np.maximum(start, lower)
    indptr, indices, data = A.indptr, A.indices, A.data
    diag = A.diagonal()
    for iteration in range(1, PSOR_MAX_ITER + 1):
        change = 0.0
        for i in range(u.size):
            row = slice(indptr[i], indptr[i + 1])
            residual = rhs[i] - np.dot(data[row], u[indices[row]])
            updated = max(lower[i], u[i] + PSOR_OMEGA * residual / diag[i])
            change = max(change, abs(updated - u[i]))
            u[i] = updated
        if change < PSOR_TOL:
            return u, iteration
    raise NumericsError(f'PSOR did not converge in {PSOR_MAX_ITER} iterations',
                        details={'last_change': change})


def _retained_steps(grid: SimplexGrid, retain: Sequence[float]) -> List[int]:
    steps = {0, grid.time_steps}
    for t in retain:
        if grid.t0 <= t <= grid.T and grid.dt > 0:
            steps.add(int(round((t - grid.t0) / grid.dt)))
    return sorted(steps)


@timed('solve_obstacle')
def solve_obstacle(profile: CoefficientProfile, spec: ProblemSpec, grid: SimplexGrid,
                   mode: str = 'projected', penalty: float = 0.0, theta: float = 1.0,
                   psor: bool = False, retain: Sequence[float] = ()) -> GridSolution:
    """Backward theta-scheme from u(T) = g with projection or penalisation per step."""
    if mode not in ('projected', 'penalized'):
        raise ValidationError(f"Unknown PDE mode '{mode}'. Valid modes: ['projected', 'penalized']")
    if mode == 'penalized' and not penalty > 0:
        raise ValidationError('Penalized mode needs a positive penalty')
    if not 0.5 <= theta <= 1.0:
        raise ValidationError(f'theta must lie in [0.5, 1], got {theta}')

    operator = assemble_operator(profile, grid)
    L = operator.matrix
    P = grid.size
    dt = grid.dt
    times = grid.times
    identity = sparse.identity(P, format='csr')
    if theta < 1.0 and dt > 0:
        cfl = (1.0 - theta) * dt * float(np.max(np.abs(L.diagonal())))
        if cfl > 1.0:
            raise NumericsError(f'Explicit part violates the CFL bound: (1-theta) dt max|L_ii| = {cfl:.3g} > 1',
                                details={'cfl': cfl, 'theta': theta, 'dt': dt})

    x_nodes = grid.nodes_x()
    sigma = profile.sigma_array
    generator = spec.generator
    obstacle = spec.obstacle
    has_obstacle = spec.has_obstacle

    u = np.asarray(spec.terminal(x_nodes), dtype=float)
    keep = _retained_steps(grid, retain)
    levels = {grid.time_steps: u.reshape(grid.shape).copy()}
    contact = {grid.time_steps: (u <= obstacle(times[-1], x_nodes)) if has_obstacle
               else np.zeros(P, dtype=bool)}
    factors = {}
    residuals = []
    complementarity = 0.0
    psor_iterations = 0

    for k in range(grid.time_steps - 1, -1, -1):
        t = times[k]
        b = generator.y_coefficient(t)
        grad_xi = _gradient(u.reshape(grid.shape), grid.spacings)
        grad_x = np.stack([g.ravel() for g in grad_xi], axis=-1) @ grid.J
        alpha = generator.intercept(t, x_nodes, sigma * grad_x)

        Lb = L + b * identity
        rhs = u + dt * alpha
        if theta < 1.0:
            rhs = rhs + (1.0 - theta) * dt * (Lb @ u)
        key = round(float(b), 14)
        if key not in factors:
            system = (identity - theta * dt * Lb).tocsc()
            try:
                factors[key] = (splu(system), system)
            except RuntimeError as exc:
                raise NumericsError(f'Sparse LU failed at t={t:.4g}: {exc}',
                                    details={'norm_1': float(abs(system).sum(axis=0).max())})
        lu, system = factors[key]
        candidate = lu.solve(rhs)
        if not np.all(np.isfinite(candidate)):
            raise NumericsError(f'Linear solve produced non-finite values at t={t:.4g}',
                                details={'norm_1': float(abs(system).sum(axis=0).max())})

        h = obstacle(t, x_nodes) if has_obstacle else None
        if h is None:
            new = candidate
        elif mode == 'projected' and psor:
            new, iterations = _psor(system.tocsr(), rhs, h, candidate)
            psor_iterations += iterations
        elif mode == 'projected':
            new = np.maximum(candidate, h)
        else:
            new = np.where(candidate >= h, candidate, (candidate + dt * penalty * h) / (1.0 + dt * penalty))

        # -d_t u - L u - F at the new level, in the scheme's own weighting
        equation = -((u - new) / dt + theta * (Lb @ new) + (1.0 - theta) * (Lb @ u) + alpha)
        gap = np.minimum(new - h, equation) if h is not None else equation
        complementarity = max(complementarity, float(np.max(np.abs(gap))))

        u = new
        residuals.append(boundary_face_residual(u.reshape(grid.shape), grid))
        if k in keep:
            levels[k] = u.reshape(grid.shape).copy()
            contact[k] = (u <= h) if h is not None else np.zeros(P, dtype=bool)

    order = sorted(levels)
    solution = GridSolution(
        grid=grid,
        times=np.array([times[k] for k in order]),
        values=[levels[k] for k in order],
        contact=[contact[k].reshape(grid.shape) for k in order],
        terminal=spec.terminal,
        mode=mode,
        boundary_residuals=np.array(residuals[::-1]),
        complementarity_residual=complementarity,
        diagnostics={'theta': theta, 'penalty': penalty if mode == 'penalized' else None,
                     'psor': psor, 'psor_iterations': psor_iterations,
                     'factorisations': len(factors), 'mesh_ratios': operator.mesh_ratios,
                     'peclet_ok': operator.peclet_ok,
                     'diffusion': operator.diffusion.tolist(), 'drift': operator.drift.tolist()},
    )
    logger.info('PDE %s solve: %d nodes x %d steps, boundary residual %.3g, complementarity %.3g',
                mode, P, grid.time_steps, solution.boundary_residual, complementarity)
    return solution


def boundary_residual(solution: GridSolution) -> Dict:
    """Face-condition residual report: max over the steps before T and at t0."""
    residuals = solution.boundary_residuals
    return {
        'max': solution.boundary_residual,
        't0': float(residuals[0]) if residuals.size else 0.0,
        'per_step': residuals.tolist(),
        'gap_spacings': list(solution.grid.spacings[1:]),
    }


def truncation_check(profile: CoefficientProfile, spec: ProblemSpec, grid: SimplexGrid,
                     probes: Sequence[Sequence[float]], tolerance: float = 1e-3, **options) -> Dict:
    """Re-solve on a box of twice the radius at equal spacing and compare t0 probes."""
    base = solve_obstacle(profile, spec, grid, **options)
    wide = solve_obstacle(profile, spec, grid.widened(2.0), **options)
    rows = []
    for x in probes:
        a, b = base.probe(grid.t0, x), wide.probe(grid.t0, x)
        rows.append({'x': list(x), 'u': a, 'u_widened': b,
                     'change': None if a is None or b is None else abs(a - b)})
    changes = [r['change'] for r in rows if r['change'] is not None]
    worst = max(changes) if changes else None
    return {'radius': grid.radius, 'widened_radius': grid.radius * 2.0, 'probes': rows,
            'max_change': worst, 'passed': worst is not None and worst <= tolerance}
