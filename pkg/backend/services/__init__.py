from .sde_engine import SDEEngine
from .regression import RegressionBasis

__all__ = ['SDEEngine', 'RegressionBasis']
