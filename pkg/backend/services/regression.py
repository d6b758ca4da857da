"""
Least-squares conditional expectations for the backward solvers.

Features are monomials in the ranked coordinates up to a degree, plus the
obstacle and terminal payoff evaluated at the current state. Columns are
standardised before the fit; constant and duplicate columns are dropped. A
rank-deficient design first loses the payoff columns, then the top degree.
"""

from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Dict, List, Optional, Tuple

import numpy as np

from utils.error_handlers import ValidationError
from utils.logging_config import get_logger

logger = get_logger(__name__)


@dataclass
class RegressionFit:
    fitted: np.ndarray
    coefficients: np.ndarray
    condition_number: float
    degree: int
    columns: int


@dataclass
class RegressionBasis:
    """Polynomial + payoff-feature basis with per-step fit records"""

    degree: int = 2
    use_obstacle: bool = True
    use_terminal: bool = True
    split_sample: bool = False
    fits: List[Dict] = field(default_factory=list)
    fallbacks: int = 0

    def reset(self) -> None:
        self.fits = []
        self.fallbacks = 0

    def describe(self) -> Dict:
        return {'family': 'monomials', 'degree': self.degree, 'use_obstacle': self.use_obstacle,
                'use_terminal': self.use_terminal, 'split_sample': self.split_sample}

    @staticmethod
    def monomials(x: np.ndarray, degree: int) -> np.ndarray:
        """All monomials of total degree <= degree in the columns of x, intercept first."""
        M, n = x.shape
        columns = [np.ones(M)]
        for d in range(1, degree + 1):
            for combo in combinations_with_replacement(range(n), d):
                columns.append(np.prod(x[:, list(combo)], axis=1))
        return np.column_stack(columns)

    def design(self, x: np.ndarray, degree: int, h: Optional[np.ndarray] = None,
               g: Optional[np.ndarray] = None) -> np.ndarray:
        parts = [self.monomials(x, degree)]
        if self.use_obstacle and h is not None and np.all(np.isfinite(h)):
            parts.append(h[:, None])
        if self.use_terminal and g is not None:
            parts.append(g[:, None])
        return np.hstack(parts)

    @staticmethod
    def _prepare(A: np.ndarray, rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Drop constant and duplicate non-intercept columns; standardise the rest."""
        sample = A[rows]
        scale = sample[:, 1:].std(axis=0)
        keep = np.flatnonzero(scale > 1e-12 * (1.0 + np.abs(sample[:, 1:]).max(axis=0))) + 1
        if keep.size:
            _, first = np.unique(np.round(A[:, keep], 12), axis=1, return_index=True)
            keep = keep[np.sort(first)]
        mean = sample[:, keep].mean(axis=0)
        std = sample[:, keep].std(axis=0)
        standardised = np.column_stack([np.ones(A.shape[0])] + [(A[:, c] - m) / s
                                                                  for c, m, s in zip(keep, mean, std)])
        return standardised, keep, std

    def fit(self, x: np.ndarray, targets: np.ndarray, h: Optional[np.ndarray] = None,
            g: Optional[np.ndarray] = None, step: Optional[int] = None,
            mask: Optional[np.ndarray] = None) -> RegressionFit:
        """Project each column of targets (M,) or (M, q) on the basis at state x (M, n).

        With a boolean mask the coefficients are estimated on the selected rows
        only (at least one) and the fitted values are still returned for every row.
        """
        targets = np.asarray(targets, dtype=float)
        single = targets.ndim == 1
        T2 = targets[:, None] if single else targets
        M = T2.shape[0]
        sample = np.flatnonzero(mask) if mask is not None else np.arange(M)
        if sample.size == 0:
            raise ValidationError('Regression mask selects no rows')
        rows = sample[::2] if self.split_sample and sample.size > 1 else sample

        first = T2[sample[:1]]
        constant = np.all(T2[sample] == first, axis=0)
        if np.all(constant):
            fitted = np.repeat(first, M, axis=0)
            result = RegressionFit(fitted[:, 0] if single else fitted, first.copy(), 1.0, 0, 1)
            self._record(step, result)
            return result

        degree = self.degree
        features = h is not None or g is not None
        while True:
            A, keep, _ = self._prepare(self.design(x, degree, h, g) if features
                                       else self.monomials(x, degree), rows)
            if A.shape[1] == 1:
                fitted = np.repeat(T2[rows].mean(axis=0, keepdims=True), M, axis=0)
                coefficients = T2[rows].mean(axis=0, keepdims=True)
                condition = 1.0
                break
            sub = A[rows]
            rank = np.linalg.matrix_rank(sub)
            if rank == sub.shape[1] or degree == 0:
                coefficients, _, _, singular = np.linalg.lstsq(sub, T2[rows], rcond=None)
                condition = float(singular[0] / singular[-1]) if singular[-1] > 0 else float('inf')
                fitted = A @ coefficients
                break
            if features:
                # payoff columns inside the polynomial span (linear payoffs) add nothing
                logger.debug('Payoff features are collinear with the monomials at step %s; dropping them', step)
                features = False
                continue
            logger.warning('Regression design rank %d < %d columns at step %s; reducing degree %d -> %d',
                           rank, sub.shape[1], step, degree, degree - 1)
            self.fallbacks += 1
            degree -= 1

        # columns whose target is exactly constant keep that constant
        if np.any(constant):
            fitted[:, constant] = first[:, constant]
        result = RegressionFit(fitted[:, 0] if single else fitted, coefficients, condition, degree, A.shape[1])
        self._record(step, result)
        return result

    def _record(self, step, result: RegressionFit) -> None:
        self.fits.append({'step': step, 'degree': result.degree, 'columns': result.columns,
                          'condition_number': result.condition_number})

    @property
    def max_condition_number(self) -> float:
        return max((f['condition_number'] for f in self.fits), default=1.0)
