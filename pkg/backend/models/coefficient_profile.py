from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from utils.error_handlers import ValidationError

TIME_FUNCTION_KINDS = ('constant', 'piecewise', 'linear')


@dataclass(frozen=True)
class TimeFunction:
    """Bounded deterministic function of time (interest rates, generator coefficients)"""

    kind: str = 'constant'
    value: float = 0.0
    times: Tuple[float, ...] = ()
    values: Tuple[float, ...] = ()
    start: float = 0.0
    end: float = 0.0
    horizon: float = 1.0

    def __post_init__(self):
        if self.kind not in TIME_FUNCTION_KINDS:
            raise ValidationError(f"Unknown time function kind '{self.kind}'. "
                                  f"Valid kinds: {list(TIME_FUNCTION_KINDS)}",
                                  details={'key': 'kind'})
        if self.kind == 'piecewise':
            if len(self.values) != len(self.times) + 1:
                raise ValidationError('Piecewise function needs len(values) == len(times) + 1')
            if any(b <= a for a, b in zip(self.times, self.times[1:])):
                raise ValidationError('Piecewise breakpoints must be strictly increasing')
        if self.kind == 'linear' and self.horizon <= 0:
            raise ValidationError('Linear ramp horizon must be positive')

    def value_at(self, t):
        if self.kind == 'constant':
            return np.full_like(np.asarray(t, dtype=float), self.value)
        if self.kind == 'piecewise':
            idx = np.searchsorted(np.asarray(self.times), np.asarray(t, dtype=float), side='right')
            return np.asarray(self.values, dtype=float)[idx]
        frac = np.clip(np.asarray(t, dtype=float) / self.horizon, 0.0, 1.0)
        return self.start + (self.end - self.start) * frac

    def __call__(self, t):
        out = self.value_at(t)
        return float(out) if np.ndim(out) == 0 else out

    def integral(self, a: float, b: float, points: int = 513) -> float:
        """Integral over [a, b]; exact for constants, trapezoid otherwise."""
        if b == a:
            return 0.0
        if self.kind == 'constant':
            return self.value * (b - a)
        grid = np.linspace(a, b, points)
        if self.kind == 'piecewise':
            grid = np.unique(np.concatenate([grid, [s for s in self.times if a < s < b]]))
        vals = self.value_at(grid)
        return float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(grid)))

    def sup_abs(self) -> float:
        if self.kind == 'constant':
            return abs(self.value)
        if self.kind == 'piecewise':
            return float(np.max(np.abs(self.values)))
        return max(abs(self.start), abs(self.end))

    def to_dict(self) -> Dict:
        if self.kind == 'constant':
            return {'kind': 'constant', 'value': self.value}
        if self.kind == 'piecewise':
            return {'kind': 'piecewise', 'times': list(self.times), 'values': list(self.values)}
        return {'kind': 'linear', 'start': self.start, 'end': self.end, 'horizon': self.horizon}

    @classmethod
    def from_dict(cls, data) -> 'TimeFunction':
        if isinstance(data, (int, float)):
            return cls(kind='constant', value=float(data))
        if not isinstance(data, dict) or 'kind' not in data:
            raise ValidationError('Time function must be a number or an object with a kind')
        kind = data['kind']
        if kind == 'constant':
            return cls(kind=kind, value=float(data.get('value', 0.0)))
        if kind == 'piecewise':
            return cls(kind=kind, times=tuple(float(t) for t in data.get('times', [])),
                       values=tuple(float(v) for v in data.get('values', [])))
        if kind == 'linear':
            return cls(kind=kind, start=float(data.get('start', 0.0)), end=float(data.get('end', 0.0)),
                       horizon=float(data.get('horizon', 1.0)))
        raise ValidationError(f"Unknown time function kind '{kind}'. Valid kinds: {list(TIME_FUNCTION_KINDS)}",
                              details={'key': 'rate.kind'})

    @staticmethod
    def constant(value: float) -> 'TimeFunction':
        return TimeFunction(kind='constant', value=float(value))


def concavity_violations(sigma_sq) -> List[int]:
    """Ranks j (1-based, interior) with sigma_sq_j < (sigma_sq_{j-1} + sigma_sq_{j+1}) / 2."""
    s = np.asarray(sigma_sq, dtype=float)
    if s.size <= 2:
        return []
    return [int(i) + 2 for i in np.flatnonzero(s[1:-1] < 0.5 * (s[:-2] + s[2:]))]


def check_concavity(sigma_sq) -> bool:
    """True iff sigma_sq[i+1] >= (sigma_sq[i] + sigma_sq[i+2]) / 2 for every interior i."""
    return not concavity_violations(sigma_sq)


@dataclass(frozen=True)
class CoefficientProfile:
    """Rank-indexed drifts and volatilities of the particle system"""

    delta: Tuple[float, ...]
    sigma: Tuple[float, ...]
    rate: TimeFunction = field(default_factory=lambda: TimeFunction.constant(0.0))

    def __post_init__(self):
        object.__setattr__(self, 'delta', tuple(float(d) for d in self.delta))
        object.__setattr__(self, 'sigma', tuple(float(s) for s in self.sigma))
        if len(self.delta) == 0:
            raise ValidationError('Profile needs at least one particle')
        if len(self.delta) != len(self.sigma):
            raise ValidationError(f'delta has {len(self.delta)} entries but sigma has {len(self.sigma)}')
        if not all(np.isfinite(self.delta)) or not all(np.isfinite(self.sigma)):
            raise ValidationError('Profile coefficients must be finite')
        if any(s <= 0 for s in self.sigma):
            raise ValidationError('Every rank volatility must be strictly positive',
                                  details={'sigma': list(self.sigma)})

    @property
    def n(self) -> int:
        return len(self.delta)

    @property
    def delta_array(self) -> np.ndarray:
        return np.asarray(self.delta)

    @property
    def sigma_array(self) -> np.ndarray:
        return np.asarray(self.sigma)

    @property
    def is_concave(self) -> bool:
        return check_concavity(self.sigma_array ** 2)

    def with_drift(self, delta) -> 'CoefficientProfile':
        return CoefficientProfile(delta=tuple(delta), sigma=self.sigma, rate=self.rate)

    def to_dict(self) -> Dict:
        return {
            'n': self.n,
            'delta': list(self.delta),
            'sigma': list(self.sigma),
            'rate': self.rate.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'CoefficientProfile':
        for key in ('delta', 'sigma'):
            if key not in data:
                raise ValidationError(f'Missing required field: {key}', details={'key': key})
        profile = cls(delta=tuple(data['delta']), sigma=tuple(data['sigma']),
                      rate=TimeFunction.from_dict(data.get('rate', 0.0)))
        if 'n' in data and int(data['n']) != profile.n:
            raise ValidationError(f"n={data['n']} does not match {profile.n} coefficients",
                                  details={'key': 'n'})
        return profile
