import math
from dataclasses import replace

import pytest

from models.coefficient_profile import CoefficientProfile, TimeFunction
from models.experiment_config import Numerics
from models.market_spec import ClaimSpec, MarketSpec
from services.pricing_service import binomial_oracle, log_profile, price_american, to_log_problem
from utils.error_handlers import SpecRejectedError, ValidationError

BLACK_SCHOLES_PUT = 5.573526


def test_binomial_tree_converges_to_black_scholes() -> None:
    european = binomial_oracle(100.0, 100.0, 0.05, 0.2, 1.0, style='european')
    assert european == pytest.approx(BLACK_SCHOLES_PUT, abs=0.01)
    american = binomial_oracle(100.0, 100.0, 0.05, 0.2, 1.0)
    assert american == pytest.approx(6.09, abs=0.01)
    assert american > european


def test_american_call_without_dividends_is_european() -> None:
    american = binomial_oracle(100.0, 100.0, 0.05, 0.2, 1.0, 500, kind='call')
    european = binomial_oracle(100.0, 100.0, 0.05, 0.2, 1.0, 500, kind='call', style='european')
    assert american == pytest.approx(european, rel=1e-10)


def test_binomial_tree_edge_cases() -> None:
    assert binomial_oracle(90.0, 100.0, 0.05, 0.2, 0.0) == 10.0
    with pytest.raises(ValidationError):
        binomial_oracle(100.0, 100.0, 5.0, 0.01, 1.0, steps=1)
    with pytest.raises(ValidationError):
        binomial_oracle(100.0, 100.0, 0.05, 0.2, 1.0, kind='digital')
    with pytest.raises(ValidationError):
        binomial_oracle(-1.0, 100.0, 0.05, 0.2, 1.0)


def test_log_problem(put_market) -> None:
    profile, spec, x0 = to_log_problem(put_market)
    assert profile.delta[0] == pytest.approx(0.03)
    assert log_profile(put_market.profile).sigma == (0.2,)
    assert x0.coords[0] == pytest.approx(math.log(100.0))
    assert spec.has_obstacle
    assert spec.terminal(x0.coords) == pytest.approx(0.0)
    assert spec.obstacle(0.5, [math.log(80.0)]) == pytest.approx(20.0)


def test_price_american_put(put_market) -> None:
    result = price_american(put_market, Numerics(seed=11, n_paths=4000, time_steps=32, basis_degree=3))
    oracle = result['oracle_price']
    assert oracle == pytest.approx(6.09, abs=0.01)
    assert abs(result['price'] - oracle) < 0.01 * oracle + 3.0 * result['stderr']
    assert result['european_price'] == pytest.approx(BLACK_SCHOLES_PUT, rel=0.05)
    assert result['price'] >= result['european_price']
    assert result['early_exercise_premium'] == pytest.approx(result['price'] - result['european_price'])
    assert result['bond_value_T'] == pytest.approx(math.exp(0.05))
    assert result['diagnostics']['solver']['K_nondecreasing']
    assert 0.0 < result['diagnostics']['solver']['stopped_fraction'] < 1.0

    boundary = result['exercise_boundary_samples']
    assert boundary
    assert all(sample['price'] < 100.0 for sample in boundary)


@pytest.mark.slow
def test_american_put_within_one_percent_of_the_tree(put_market) -> None:
    result = price_american(put_market, Numerics(seed=11, n_paths=100000, time_steps=64, basis_degree=3))
    assert result['oracle_relative_gap'] < 0.01
    assert result['stderr'] < 0.05
    # same paths: the premium over the closed-form European lands on the tree too
    premium = result['price'] - result['european_price']
    assert BLACK_SCHOLES_PUT + premium == pytest.approx(result['oracle_price'], rel=0.01)


def test_longer_maturity_is_worth_more(put_market) -> None:
    numerics = Numerics(seed=11, n_paths=4000, time_steps=32, basis_degree=3)
    short = price_american(replace(put_market, T=0.5), numerics)
    long = price_american(put_market, numerics)
    assert long['price'] >= short['price'] - 3.0 * math.hypot(short['stderr'], long['stderr'])


def test_price_is_at_least_the_intrinsic_value(put_market) -> None:
    market = replace(put_market, prices=(90.0,))
    result = price_american(market, Numerics(seed=4, n_paths=2000, time_steps=16))
    assert result['price'] >= 10.0 - 1e-9


def test_two_stocks_far_apart_price_like_one(put_market) -> None:
    # equal coefficients and ranks that never meet: the top stock is the single-stock put
    profile = CoefficientProfile(delta=(0.05, 0.05), sigma=(0.2, 0.2), rate=TimeFunction.constant(0.05))
    market = MarketSpec(profile=profile, prices=(100.0, 1.0), claim=ClaimSpec(kind='put', strike=100.0, rank=1))
    numerics = Numerics(seed=11, n_paths=4000, time_steps=32, basis_degree=3)
    pair = price_american(market, numerics)
    single = price_american(put_market, numerics.with_overrides(seed=12))
    assert pair['oracle_price'] is None
    assert abs(pair['price'] - single['price']) < 0.01 * single['price'] + \
        3.0 * math.hypot(pair['stderr'], single['stderr'])


def test_stock_claim_is_worth_its_price_when_drift_equals_rate() -> None:
    profile = CoefficientProfile(delta=(0.05,), sigma=(0.2,), rate=TimeFunction.constant(0.05))
    market = MarketSpec(profile=profile, prices=(100.0,), claim=ClaimSpec(kind='stock'), exercise='none')
    result = price_american(market, Numerics(seed=3, n_paths=4000, time_steps=16))
    assert result['price'] == pytest.approx(100.0, rel=0.03)
    assert result['early_exercise_premium'] == 0.0
    assert result['oracle_price'] is None


def test_degenerate_horizon_pays_intrinsic_value() -> None:
    profile = CoefficientProfile(delta=(0.05,), sigma=(0.2,), rate=TimeFunction.constant(0.05))
    market = MarketSpec(profile=profile, prices=(90.0,), claim=ClaimSpec(kind='put', strike=100.0), T=0.0)
    result = price_american(market, Numerics(seed=1, n_paths=10))
    assert result['price'] == pytest.approx(10.0)
    assert result['stderr'] == 0.0
    assert result['diagnostics']['degenerate_horizon']


def test_exercise_above_claim_is_rejected(put_market) -> None:
    market = MarketSpec(profile=put_market.profile, prices=(100.0,), claim=ClaimSpec(kind='put', strike=100.0),
                        exercise='constant', exercise_value=500.0)
    with pytest.raises(SpecRejectedError):
        price_american(market, Numerics(seed=1, n_paths=10))


def test_two_stock_basket_has_no_oracle() -> None:
    profile = CoefficientProfile(delta=(0.0, 0.1), sigma=(0.3, 0.3), rate=TimeFunction.constant(0.05))
    market = MarketSpec(profile=profile, prices=(110.0, 90.0),
                        claim=ClaimSpec(kind='basket_put', strike=200.0))
    result = price_american(market, Numerics(seed=2, n_paths=1000, time_steps=8))
    assert result['oracle_price'] is None
    assert 'oracle_relative_gap' not in result
    assert len(result['diagnostics']['hedge_t0']) == 2
    assert result['price'] >= result['european_price'] - 3.0 * result['stderr']
