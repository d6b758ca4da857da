"""
Named and ranked coordinates.

Ranks are 0-based positions in the non-increasing order; ties go to the
lowest named index, so the named-to-rank map is always a bijection.
"""

from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from utils.error_handlers import ValidationError


def _frozen(array) -> np.ndarray:
    out = np.array(array, dtype=float, copy=True)
    out.setflags(write=False)
    return out


def rank_order(values: np.ndarray) -> np.ndarray:
    """Named index occupying each rank, along the last axis.

    A stable sort on the negated values keeps equal entries in index order.
    """
    return np.argsort(-np.asarray(values, dtype=float), axis=-1, kind='stable')


def inverse_permutation(order: np.ndarray) -> np.ndarray:
    """perm[..., i] = rank of named index i, given order[..., j] = named index at rank j."""
    return np.argsort(order, axis=-1, kind='stable')


@dataclass(frozen=True, eq=False)
class RankView:
    """Ranked configuration of a named vector at one time point"""

    ranked: np.ndarray
    perm: np.ndarray
    order: np.ndarray

    @property
    def n(self) -> int:
        return int(self.ranked.shape[-1])

    @property
    def gaps(self) -> np.ndarray:
        return self.ranked[:-1] - self.ranked[1:]

    @property
    def has_tie(self) -> bool:
        return bool(np.any(self.gaps == 0.0))

    def to_named(self, ranked_values) -> np.ndarray:
        """Apply perm^-1: named[i] = ranked_values[perm[i]]."""
        return np.asarray(ranked_values)[..., self.perm]

    def to_dict(self) -> Dict:
        return {
            'ranked': self.ranked.tolist(),
            'perm': self.perm.tolist(),
            'gaps': self.gaps.tolist(),
        }


def rank_state(x) -> RankView:
    """Sort a named vector into its ranked view with the lowest-index tie rule."""
    values = np.asarray(x, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise ValidationError('rank_state expects a non-empty vector')
    if not np.all(np.isfinite(values)):
        raise ValidationError('rank_state received non-finite coordinates',
                              details={'x': [float(v) for v in values]})
    order = rank_order(values)
    perm = inverse_permutation(order)
    order.setflags(write=False)
    perm.setflags(write=False)
    return RankView(ranked=_frozen(values[order]), perm=perm, order=order)


def named_to_ranked_z(z, view: RankView) -> np.ndarray:
    """bar z[j] = z[order[j]]: the holding attributed to the j-th ranked particle."""
    z = np.asarray(z, dtype=float)
    if z.shape[-1] != view.n:
        raise ValidationError(f'z has dimension {z.shape[-1]} but the rank view has {view.n}')
    return z[..., view.order]


def ranked_to_named_z(zbar, view: RankView) -> np.ndarray:
    """Inverse of named_to_ranked_z."""
    zbar = np.asarray(zbar, dtype=float)
    if zbar.shape[-1] != view.n:
        raise ValidationError(f'zbar has dimension {zbar.shape[-1]} but the rank view has {view.n}')
    return zbar[..., view.perm]


@dataclass(frozen=True, eq=False)
class SimplexPoint:
    """Initial condition in the closed ordered domain Gamma^n"""

    coords: np.ndarray
    face: Optional[int] = None

    @property
    def n(self) -> int:
        return int(self.coords.size)

    @property
    def interior(self) -> bool:
        return self.face is None

    def to_dict(self) -> Dict:
        return {'coords': self.coords.tolist(), 'interior': self.interior, 'face': self.face}

    @classmethod
    def from_coords(cls, coords) -> 'SimplexPoint':
        values = np.asarray(coords, dtype=float).ravel()
        if values.size == 0 or not np.all(np.isfinite(values)):
            raise ValidationError('Initial state must be a non-empty finite vector')
        gaps = values[:-1] - values[1:]
        if np.any(gaps < 0):
            raise ValidationError('Initial state must be non-increasing (ranked order)',
                                  details={'coords': values.tolist()})
        touching = np.flatnonzero(gaps == 0.0)
        if touching.size > 1:
            raise ValidationError('Initial state lies on more than one face; at most one adjacent '
                                  'equality is admissible', details={'faces': touching.tolist()})
        face = int(touching[0]) if touching.size == 1 else None
        return cls(coords=_frozen(values), face=face)

    @classmethod
    def from_named(cls, x) -> 'SimplexPoint':
        """Rank a named vector first, then validate it as a simplex point."""
        return cls.from_coords(rank_state(x).ranked)
