import json
import os

import pytest

from app import create_app
from models.coefficient_profile import CoefficientProfile, TimeFunction
from models.experiment_config import ExperimentConfig
from models.market_spec import ClaimSpec, MarketSpec
from models.problem_spec import GeneratorSpec, ObstacleSpec, PayoffSpec, ProblemSpec

SCENARIO_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), 'data', 'scenarios')


def load_scenario(name: str) -> dict:
    with open(os.path.join(SCENARIO_DIR, f'{name}.json'), 'r', encoding='utf-8') as f:
        return json.load(f)


@pytest.fixture
def linear_profile() -> CoefficientProfile:
    return CoefficientProfile(delta=(-0.1, 0.3), sigma=(1.0, 1.0))


@pytest.fixture
def linear_spec() -> ProblemSpec:
    """F = 0, g = x_1 + x_2, no obstacle: u(t, x) = x_1 + x_2 + (delta_1 + delta_2)(T - t)."""
    return ProblemSpec(generator=GeneratorSpec(kind='zero'), terminal=PayoffSpec(kind='sum'),
                       obstacle=ObstacleSpec())


@pytest.fixture
def atlas_profile() -> CoefficientProfile:
    """Atlas-type drifts with a concave sigma^2 profile."""
    return CoefficientProfile(delta=(-0.2, 0.0, 0.4), sigma=(1.0, 1.2, 1.3))


@pytest.fixture
def put_market() -> MarketSpec:
    profile = CoefficientProfile(delta=(0.05,), sigma=(0.2,), rate=TimeFunction.constant(0.05))
    return MarketSpec(profile=profile, prices=(100.0,), claim=ClaimSpec(kind='put', strike=100.0))


@pytest.fixture
def linear_document() -> dict:
    document = load_scenario('linear_n2')
    document.pop('output_dir')
    return document


@pytest.fixture
def put_document() -> dict:
    document = load_scenario('american_put')
    document.pop('output_dir')
    return document


@pytest.fixture
def small_linear_config(linear_document) -> ExperimentConfig:
    """The linear scenario at test scale."""
    linear_document['numerics'].update({'n_paths': 4000, 'time_steps': 16,
                                        'pde': {'space_steps': [40, 40], 'time_steps': 20, 'radius': 4.0},
                                        'tolerance': {'abs': 0.001, 'k': 4.0}})
    return ExperimentConfig.from_dict(linear_document)


@pytest.fixture
def app():
    return create_app('testing')


@pytest.fixture
def client(app):
    return app.test_client()
