from .coefficient_profile import CoefficientProfile, TimeFunction, check_concavity
from .rank_view import RankView, SimplexPoint, rank_state
from .problem_spec import GeneratorSpec, ObstacleSpec, PayoffSpec, ProblemSpec
from .market_spec import ClaimSpec, MarketSpec
from .path_bundle import PathBundle, TimeGrid
from .simplex_grid import SimplexGrid
from .solutions import GridSolution, ReflectedSolution

__all__ = [
    'CoefficientProfile', 'TimeFunction', 'check_concavity',
    'RankView', 'SimplexPoint', 'rank_state',
    'GeneratorSpec', 'ObstacleSpec', 'PayoffSpec', 'ProblemSpec',
    'ClaimSpec', 'MarketSpec', 'PathBundle', 'TimeGrid',
    'SimplexGrid', 'GridSolution', 'ReflectedSolution'
]
