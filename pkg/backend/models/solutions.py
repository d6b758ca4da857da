import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
import pandas as pd
from scipy.interpolate import RegularGridInterpolator

from config import Config
from models.path_bundle import TimeGrid
from models.problem_spec import PayoffSpec
from models.simplex_grid import SimplexGrid
from utils.error_handlers import ValidationError

STEP_COLUMNS = ['step', 't', 'mean_Y', 'mean_dK', 'skorokhod_partial_sum', 'condition_number']


@dataclass(frozen=True, eq=False)
class ReflectedSolution:
    """Backward (Y, Zbar, K) on a path bundle.

    Y, K: (M, N+1); Zbar: (M, N, n); dK: (M, N) with dK[:, k] the push at t_k;
    stopped: (M, N) flags of the paths whose cash flow stops at t_k.
    """

    grid: TimeGrid
    Y: np.ndarray
    Zbar: np.ndarray
    K: np.ndarray
    dK: np.ndarray
    u0: float
    stderr: float
    diagnostics: Dict = field(default_factory=dict)
    steps: List[Dict] = field(default_factory=list)
    stopped: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return int(self.Y.shape[0])

    def summary(self) -> Dict:
        return {
            'u0': self.u0,
            'stderr': self.stderr,
            'n_paths': self.n_paths,
            'grid': self.grid.to_dict(),
            'diagnostics': self.diagnostics,
        }

    def write_csv(self, path: str) -> str:
        frame = pd.DataFrame(self.steps, columns=STEP_COLUMNS)
        frame.to_csv(path, index=False, float_format=Config.CSV_FLOAT_FORMAT)
        return path


@dataclass(frozen=True, eq=False)
class GridSolution:
    """PDE value surface at the retained time levels.

    values[i] and contact[i] have the grid shape and belong to times[i].
    """

    grid: SimplexGrid
    times: np.ndarray
    values: List[np.ndarray]
    contact: List[np.ndarray]
    terminal: PayoffSpec
    mode: str = 'projected'
    boundary_residuals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    complementarity_residual: float = 0.0
    diagnostics: Dict = field(default_factory=dict)

    def level(self, t: float) -> int:
        """Index of the retained level at time t."""
        matches = np.flatnonzero(np.isclose(self.times, t, rtol=0.0, atol=1e-12 * max(1.0, abs(t))))
        if matches.size == 0:
            raise ValidationError(f't={t} is not a retained PDE time level',
                                  details={'retained': self.times.tolist()})
        return int(matches[0])

    def probe(self, t: float, x) -> Optional[float]:
        """u(t, x) for a ranked point x by multilinear interpolation.

        Returns None when x lies outside the truncated domain. At t = T the
        terminal payoff is evaluated directly.
        """
        x = np.asarray(x, dtype=float).ravel()
        if x.size != self.grid.n:
            raise ValidationError(f'Probe has dimension {x.size}, grid has n={self.grid.n}')
        if np.any(x[:-1] < x[1:]):
            raise ValidationError('Probe points are ranked coordinates and must be non-increasing',
                                  details={'x': x.tolist()})
        if not self.grid.contains(x):
            return None
        if t == self.grid.T:
            return float(self.terminal(x))
        idx = self.level(t)
        interpolator = RegularGridInterpolator(self.grid.axes, self.values[idx], method='linear')
        xi = np.clip(self.grid.to_xi(x), [a[0] for a in self.grid.axes], [a[-1] for a in self.grid.axes])
        return float(interpolator(xi[None, :])[0])

    @property
    def boundary_residual(self) -> float:
        return float(np.max(self.boundary_residuals)) if self.boundary_residuals.size else 0.0

    def contact_fraction(self, t: Optional[float] = None) -> float:
        idx = 0 if t is None else self.level(t)
        return float(np.mean(self.contact[idx]))

    def summary(self) -> Dict:
        return {
            'mode': self.mode,
            'grid': self.grid.to_dict(),
            'retained_times': self.times.tolist(),
            'boundary_residual': self.boundary_residual,
            'complementarity_residual': self.complementarity_residual,
            'contact_fraction_t0': self.contact_fraction(),
            'diagnostics': self.diagnostics,
        }

    def write_csv(self, path: str) -> str:
        """One row per node per retained level: t, xi axes, ranked x, u, contact."""
        xi = self.grid.nodes_xi()
        x = self.grid.nodes_x()
        columns = self.grid.names + [f'x_{j + 1}' for j in range(self.grid.n)]
        levels = []
        for t, values, contact in zip(self.times, self.values, self.contact):
            level = pd.DataFrame(np.hstack([xi, x]), columns=columns)
            level.insert(0, 't', float(t))
            level['u'] = values.ravel()
            level['contact'] = contact.ravel().astype(int)
            levels.append(level)
        pd.concat(levels, ignore_index=True).to_csv(path, index=False, float_format=Config.CSV_FLOAT_FORMAT)
        return path

    def write_json(self, path: str, probes: Optional[List[Dict]] = None) -> str:
        payload = self.summary()
        payload['probes'] = []
        for probe in probes or []:
            payload['probes'].append({'t': probe['t'], 'x': list(probe['x']),
                                      'u': self.probe(probe['t'], probe['x'])})
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True)
        return path
