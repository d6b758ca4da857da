from dataclasses import dataclass, field, replace
from typing import Dict, Optional

import numpy as np
import pandas as pd

from config import Config
from utils.error_handlers import ValidationError


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid t_k = t0 + k*dt, k = 0..steps"""

    t0: float
    T: float
    steps: int

    def __post_init__(self):
        if not (np.isfinite(self.t0) and np.isfinite(self.T)):
            raise ValidationError('Time grid endpoints must be finite')
        if self.T < self.t0:
            raise ValidationError(f'Horizon T={self.T} precedes start t0={self.t0}')
        if int(self.steps) != self.steps or self.steps < 1:
            raise ValidationError(f'Time grid needs at least one step, got {self.steps}')

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.steps

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.steps + 1)

    @property
    def degenerate(self) -> bool:
        return self.T == self.t0

    def refined(self, factor: int = 2) -> 'TimeGrid':
        return TimeGrid(self.t0, self.T, self.steps * factor)

    def to_dict(self) -> Dict:
        return {'t0': self.t0, 'T': self.T, 'steps': self.steps, 'dt': self.dt}


@dataclass(frozen=True, eq=False)
class PathBundle:
    """Simulated named and ranked trajectories.

    Shapes: X, ranked (M, N+1, n); order (M, N+1, n) named index at each rank;
    dW, dbeta (M, N, n); local_time (M, N+1, n-1) for the pairs (j, j+1).
    """

    grid: TimeGrid
    X: np.ndarray
    ranked: np.ndarray
    order: np.ndarray
    dW: np.ndarray
    dbeta: np.ndarray
    seed: int
    local_time: Optional[np.ndarray] = None
    diagnostics: Dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return int(self.X.shape[0])

    @property
    def n(self) -> int:
        return int(self.X.shape[2])

    @property
    def perm(self) -> np.ndarray:
        """Rank of each named particle, (M, N+1, n)."""
        return np.argsort(self.order, axis=-1, kind='stable')

    def gaps(self) -> np.ndarray:
        """Gap processes G_j = X_(j) - X_(j+1), shape (M, N+1, n-1)."""
        return self.ranked[..., :-1] - self.ranked[..., 1:]

    def with_local_time(self, local_time: np.ndarray, diagnostics: Dict) -> 'PathBundle':
        merged = dict(self.diagnostics)
        merged.update(diagnostics)
        return replace(self, local_time=local_time, diagnostics=merged)

    def collision_statistics(self, proximity: Optional[float] = None) -> Dict:
        """Tie-set and triple-proximity frequencies over all (path, step) pairs."""
        gaps = self.gaps()
        if self.n < 2:
            return {'tie_fraction': 0.0, 'triple_proximity_fraction': 0.0, 'min_gap': None}
        if proximity is None:
            proximity = np.sqrt(max(self.grid.dt, 0.0))
        ties = np.any(gaps == 0.0, axis=-1)[:, 1:]
        if self.n >= 3:
            close = gaps < proximity
            triples = np.any(close[..., :-1] & close[..., 1:], axis=-1)[:, 1:]
            triple_fraction = float(np.mean(triples)) if triples.size else 0.0
        else:
            triple_fraction = 0.0
        return {
            'tie_fraction': float(np.mean(ties)) if ties.size else 0.0,
            'triple_proximity_fraction': triple_fraction,
            'proximity': float(proximity),
            'min_gap': float(np.min(gaps[:, 1:])) if gaps[:, 1:].size else float(np.min(gaps)),
        }

    def csv_header(self):
        n = self.n
        return (['path_id', 'k', 't']
                + [f'X_{i + 1}' for i in range(n)]
                + [f'ranked_{j + 1}' for j in range(n)]
                + [f'dbeta_{j + 1}' for j in range(n)]
                + [f'Lambda_{j + 1}_{j + 2}' for j in range(n - 1)])

    def write_csv(self, path: str) -> str:
        """One row per path per step; increments are blank on the last row."""
        times = self.grid.times
        steps = self.grid.steps
        local_time = self.local_time
        if local_time is None:
            local_time = np.zeros(self.ranked.shape[:2] + (self.n - 1,))
        M, n = self.n_paths, self.n
        rows = M * (steps + 1)
        increments = np.full((M, steps + 1, n), np.nan)
        increments[:, :steps] = self.dbeta
        frame = pd.DataFrame(
            np.hstack([self.X.reshape(rows, n), self.ranked.reshape(rows, n),
                       increments.reshape(rows, n), local_time.reshape(rows, n - 1)]),
            columns=self.csv_header()[3:])
        frame.insert(0, 't', np.tile(times, M))
        frame.insert(0, 'k', np.tile(np.arange(steps + 1), M))
        frame.insert(0, 'path_id', np.repeat(np.arange(M), steps + 1))
        frame.to_csv(path, index=False, float_format=Config.CSV_FLOAT_FORMAT)
        return path

    def summary(self) -> Dict:
        terminal = self.ranked[:, -1, :]
        return {
            'grid': self.grid.to_dict(),
            'n_paths': self.n_paths,
            'n': self.n,
            'seed': self.seed,
            'terminal_ranked_mean': terminal.mean(axis=0).tolist(),
            'terminal_ranked_std': terminal.std(axis=0, ddof=1).tolist() if self.n_paths > 1 else None,
            'mean_local_time': (self.local_time[:, -1, :].mean(axis=0).tolist()
                                if self.local_time is not None else None),
            'diagnostics': self.diagnostics,
        }
