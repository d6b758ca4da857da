"""
Truncated tensor grid over the ordered domain in sum/gap coordinates.

xi = J x with J the sum row followed by adjacent differences, so the gap
axes start exactly at 0 (the images of the faces x_i = x_{i+1}).
"""

from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np

from utils.error_handlers import ValidationError

MAX_PDE_DIMENSION = 3


def transform_matrix(n: int) -> np.ndarray:
    """Rows: (1,...,1), then e_i - e_{i+1} for i = 1..n-1."""
    J = np.zeros((n, n))
    J[0, :] = 1.0
    for i in range(n - 1):
        J[i + 1, i] = 1.0
        J[i + 1, i + 1] = -1.0
    return J


def axis_names(n: int) -> List[str]:
    if n == 1:
        return ['x']
    if n == 2:
        return ['s', 'gamma']
    return ['s'] + [f'gamma_{i}' for i in range(1, n)]


@dataclass(frozen=True, eq=False)
class SimplexGrid:
    """Spatial axes in xi coordinates plus a uniform time partition"""

    n: int
    axes: Tuple[np.ndarray, ...]
    t0: float
    T: float
    time_steps: int
    radius: float

    def __post_init__(self):
        if not 1 <= self.n <= MAX_PDE_DIMENSION:
            raise ValidationError(f'PDE grids support 1 <= n <= {MAX_PDE_DIMENSION}, got n={self.n}')
        if len(self.axes) != self.n:
            raise ValidationError('One axis per transformed coordinate is required')
        for name, axis in zip(axis_names(self.n), self.axes):
            if axis.size < 3:
                raise ValidationError(f'Axis {name} needs at least 3 nodes')
            if np.any(np.diff(axis) <= 0):
                raise ValidationError(f'Axis {name} must be strictly increasing')
        for axis in self.axes[1:]:
            if axis[0] != 0.0:
                raise ValidationError('Gap axes must start exactly at 0')
        if self.time_steps < 1 or self.T < self.t0:
            raise ValidationError('PDE time partition needs T >= t0 and at least one step')

    @property
    def J(self) -> np.ndarray:
        return transform_matrix(self.n)

    @property
    def names(self) -> List[str]:
        return axis_names(self.n)

    @property
    def gap_axes(self) -> Tuple[int, ...]:
        return tuple(range(1, self.n))

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(axis.size for axis in self.axes)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def spacings(self) -> Tuple[float, ...]:
        return tuple(float(axis[1] - axis[0]) for axis in self.axes)

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.time_steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.time_steps + 1)

    def nodes_xi(self) -> np.ndarray:
        """All nodes as rows (size, n) in C order."""
        mesh = np.meshgrid(*self.axes, indexing='ij')
        return np.stack([m.ravel() for m in mesh], axis=-1)

    def nodes_x(self) -> np.ndarray:
        return self.to_x(self.nodes_xi())

    def to_xi(self, x) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.J.T

    def to_x(self, xi) -> np.ndarray:
        return np.linalg.solve(self.J, np.asarray(xi, dtype=float).T).T

    def contains(self, x) -> bool:
        xi = self.to_xi(x)
        lower = np.array([axis[0] for axis in self.axes])
        upper = np.array([axis[-1] for axis in self.axes])
        tol = 1e-12 * (1.0 + np.abs(upper))
        return bool(np.all(xi >= lower - tol) and np.all(xi <= upper + tol))

    def refined(self, factor: int = 2) -> 'SimplexGrid':
        """Same box, every spacing and the time step divided by factor."""
        axes = tuple(np.linspace(axis[0], axis[-1], (axis.size - 1) * factor + 1) for axis in self.axes)
        return SimplexGrid(self.n, axes, self.t0, self.T, self.time_steps * factor, self.radius)

    def widened(self, factor: float = 2.0) -> 'SimplexGrid':
        """Radius multiplied by factor at unchanged spacing."""
        spacings = self.spacings
        axes = []
        first = self.axes[0]
        centre = 0.5 * (first[0] + first[-1])
        half = 0.5 * (first[-1] - first[0]) * factor
        count = int(round(2 * half / spacings[0]))
        axes.append(np.linspace(centre - half, centre + half, count + 1))
        for axis, h in zip(self.axes[1:], spacings[1:]):
            count = int(round(axis[-1] * factor / h))
            axes.append(np.linspace(0.0, axis[-1] * factor, count + 1))
        return SimplexGrid(self.n, tuple(axes), self.t0, self.T, self.time_steps, self.radius * factor)

    def to_dict(self) -> Dict:
        return {
            'n': self.n,
            'axes': {name: {'min': float(axis[0]), 'max': float(axis[-1]), 'nodes': int(axis.size),
                            'spacing': float(axis[1] - axis[0])}
                     for name, axis in zip(self.names, self.axes)},
            't0': self.t0,
            'T': self.T,
            'time_steps': self.time_steps,
            'radius': self.radius,
        }

    @classmethod
    def build(cls, centre, radius: float, space_steps, time_steps: int,
              t0: float, T: float) -> 'SimplexGrid':
        """Grid around a ranked point: the sum axis spans centre +/- radius and
        each gap axis spans [0, gap at centre + radius]."""
        centre = np.asarray(centre, dtype=float).ravel()
        n = centre.size
        if radius <= 0:
            raise ValidationError('PDE truncation radius must be positive')
        steps: Sequence[int] = ([int(space_steps)] * n if np.isscalar(space_steps)
                                else [int(s) for s in space_steps])
        if len(steps) != n:
            raise ValidationError(f'space_steps has {len(steps)} entries for n={n}',
                                  details={'key': 'numerics.pde.space_steps'})
        if any(s < 2 for s in steps):
            raise ValidationError('Every PDE axis needs at least 2 intervals')
        xi = transform_matrix(n) @ centre
        axes = [np.linspace(xi[0] - radius, xi[0] + radius, steps[0] + 1)]
        for a in range(1, n):
            axes.append(np.linspace(0.0, max(xi[a], 0.0) + radius, steps[a] + 1))
        return cls(n, tuple(axes), float(t0), float(T), int(time_steps), float(radius))
