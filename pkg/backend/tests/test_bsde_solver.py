import csv
import math

import numpy as np
import pytest

from models.coefficient_profile import TimeFunction
from models.experiment_config import Numerics
from models.path_bundle import TimeGrid
from models.problem_spec import GeneratorSpec, ObstacleSpec, PayoffSpec, ProblemSpec
from services.bsde_solver import (estimate_solution, estimate_u, make_basis, named_controls, solve_bsde,
                                  solve_penalized, solve_reflected)
from services.pricing_service import to_log_problem
from services.regression import RegressionBasis
from services.sde_engine import simulate
from utils.error_handlers import NumericsError, ValidationError


@pytest.fixture
def put_problem(put_market):
    profile, spec, x0 = to_log_problem(put_market)
    bundle = simulate(profile, x0, TimeGrid(0.0, 1.0, 16), 2000, seed=13)
    return spec, bundle


def test_regression_reproduces_polynomials() -> None:
    rng = np.random.default_rng(0)
    x = rng.normal(size=(500, 2))
    target = 1.0 + x[:, 0] - 2.0 * x[:, 1] ** 2 + 0.5 * x[:, 0] * x[:, 1]
    basis = RegressionBasis(degree=2)
    fit = basis.fit(x, target, step=3)
    assert np.allclose(fit.fitted, target, atol=1e-8)
    assert basis.fits[0]['step'] == 3
    assert basis.fits[0]['degree'] == 2


def test_regression_handles_constant_targets_and_states() -> None:
    rng = np.random.default_rng(1)
    basis = RegressionBasis(degree=3)
    x = rng.normal(size=(50, 2))
    assert np.all(basis.fit(x, np.full(50, 4.0)).fitted == 4.0)

    frozen = np.ones((50, 2))
    target = rng.normal(size=50)
    assert np.allclose(basis.fit(frozen, target).fitted, target.mean())


def test_regression_fits_several_targets() -> None:
    rng = np.random.default_rng(2)
    x = rng.normal(size=(200, 1))
    targets = np.column_stack([x[:, 0], np.full(200, 2.0)])
    fit = RegressionBasis(degree=1, split_sample=True).fit(x, targets)
    assert fit.fitted.shape == (200, 2)
    assert np.allclose(fit.fitted[:, 0], x[:, 0])
    assert np.all(fit.fitted[:, 1] == 2.0)


def test_linear_bsde_matches_the_sample_mean(linear_profile, linear_spec) -> None:
    bundle = simulate(linear_profile, [0.5, -0.5], TimeGrid(0.0, 1.0, 16), 4000, seed=17)
    solution = solve_bsde(bundle, linear_spec, make_basis(2))
    terminal = bundle.ranked[:, -1].sum(axis=1)
    assert solution.u0 == pytest.approx(terminal.mean(), abs=1e-9)
    assert solution.stderr == pytest.approx(terminal.std(ddof=1) / math.sqrt(4000))
    assert abs(solution.u0 - 0.2) < 4.0 * solution.stderr
    assert np.all(solution.K == 0.0)
    assert solution.diagnostics['K_nondecreasing']


def test_discounted_constant_is_exact(linear_profile) -> None:
    spec = ProblemSpec(generator=GeneratorSpec(kind='discount', rate=TimeFunction.constant(0.1)),
                       terminal=PayoffSpec(kind='constant', value=1.0))
    bundle = simulate(linear_profile, [0.5, -0.5], TimeGrid(0.0, 1.0, 10), 100, seed=2)
    solution = solve_bsde(bundle, spec, make_basis())
    assert solution.u0 == pytest.approx((1.0 + 0.1 * 0.1) ** -10)
    assert solution.stderr == pytest.approx(0.0, abs=1e-12)


def test_solve_bsde_refuses_obstacles(put_problem) -> None:
    spec, bundle = put_problem
    with pytest.raises(ValidationError):
        solve_bsde(bundle, spec, make_basis())


def test_step_size_rule(linear_profile) -> None:
    spec = ProblemSpec(generator=GeneratorSpec(kind='discount', rate=TimeFunction.constant(20.0)),
                       terminal=PayoffSpec(kind='sum'))
    bundle = simulate(linear_profile, [0.5, -0.5], TimeGrid(0.0, 1.0, 10), 10, seed=2)
    with pytest.raises(NumericsError) as excinfo:
        solve_bsde(bundle, spec, make_basis())
    assert excinfo.value.details['max_dt'] == pytest.approx(0.05)


def test_reflected_solution_invariants(put_problem) -> None:
    spec, bundle = put_problem
    solution = solve_reflected(bundle, spec, make_basis(2))
    N = bundle.grid.steps
    obstacle = spec.obstacle(0.0, bundle.ranked)
    assert np.all(solution.Y >= obstacle)
    assert np.array_equal(solution.Y[:, N], spec.terminal(bundle.ranked[:, N]))
    assert np.all(solution.dK >= 0.0)
    assert solution.diagnostics['K_nondecreasing']
    assert solution.diagnostics['max_obstacle_violation'] == 0.0
    assert solution.Zbar.shape == (2000, N, 1)
    assert len(solution.steps) == N + 1
    assert solution.steps[-1]['skorokhod_partial_sum'] == pytest.approx(solution.diagnostics['skorokhod_sum'])

    european = solve_bsde(bundle, spec.without_obstacle(), make_basis(2))
    assert solution.u0 > european.u0


def test_penalized_prices_increase_towards_reflected(put_problem) -> None:
    spec, bundle = put_problem
    reflected = solve_reflected(bundle, spec, make_basis(2))
    values = [solve_penalized(bundle, spec, make_basis(2), m) for m in (10.0, 100.0, 1000.0)]
    for lower, higher in zip(values, values[1:]):
        assert higher.u0 >= lower.u0 - higher.stderr
    assert all(np.all(v.K == 0.0) for v in values)
    assert abs(values[-1].u0 - reflected.u0) / reflected.u0 < 0.02
    with pytest.raises(ValidationError):
        solve_penalized(bundle, spec, make_basis(2), -1.0)


def test_higher_obstacle_gives_higher_value(put_problem) -> None:
    spec, bundle = put_problem
    discounted = ObstacleSpec(kind='discounted_payoff', payoff=spec.terminal, discount_rate=0.05, maturity=1.0)
    low_spec = spec.with_obstacle(discounted)
    times = bundle.grid.times
    for k in range(bundle.grid.steps + 1):
        x = bundle.ranked[:, k]
        assert np.all(low_spec.obstacle(times[k], x) <= spec.obstacle(times[k], x))

    low = solve_reflected(bundle, low_spec, make_basis(2))
    high = solve_reflected(bundle, spec, make_basis(2))
    european = solve_bsde(bundle, spec.without_obstacle(), make_basis(2))
    assert high.u0 >= low.u0 - 3.0 * math.hypot(low.stderr, high.stderr)
    assert low.u0 >= european.u0 - 3.0 * math.hypot(low.stderr, european.stderr)


def test_split_sample_reports_finite_integrability_moments(put_problem) -> None:
    spec, bundle = put_problem
    full = solve_reflected(bundle, spec, make_basis(2))
    split = solve_reflected(bundle, spec, make_basis(2, split_sample=True))
    assert split.diagnostics['regression']['basis']['split_sample']
    for key in ('l2_sup_Y', 'l2_Z'):
        assert math.isfinite(split.diagnostics[key])
        assert split.diagnostics[key] > 0.0
    assert split.diagnostics['l2_sup_Y'] == pytest.approx(full.diagnostics['l2_sup_Y'], rel=0.1)
    assert split.diagnostics['l2_Z'] == pytest.approx(full.diagnostics['l2_Z'], rel=0.3)
    assert abs(split.u0 - full.u0) < 0.05 * full.u0


def test_named_controls_follow_permutations(linear_profile, linear_spec) -> None:
    bundle = simulate(linear_profile, [0.1, 0.0], TimeGrid(0.0, 1.0, 8), 200, seed=4)
    solution = solve_bsde(bundle, linear_spec, make_basis(1))
    Z, ties = named_controls(solution, bundle)
    assert Z.shape == solution.Zbar.shape
    assert ties.shape == (200, 8)
    perm = bundle.perm[:, :8]
    assert np.array_equal(np.take_along_axis(Z, np.argsort(perm, axis=-1), axis=-1), solution.Zbar)


def test_degenerate_horizon_returns_terminal(linear_profile, linear_spec) -> None:
    numerics = Numerics(seed=1, n_paths=10, time_steps=4)
    solution, bundle = estimate_solution(linear_profile, linear_spec, [2.0, 1.0], 1.0, 1.0, numerics)
    assert bundle is None
    assert solution.u0 == 3.0
    assert solution.stderr == 0.0


def test_estimate_u_is_reproducible(linear_profile, linear_spec) -> None:
    numerics = Numerics(seed=5, n_paths=500, time_steps=8)
    assert estimate_u(linear_profile, linear_spec, [0.5, -0.5], 0.0, 1.0, numerics) == \
        estimate_u(linear_profile, linear_spec, [0.5, -0.5], 0.0, 1.0, numerics.with_overrides(threads=3))


def test_step_table_csv(tmp_path, put_problem) -> None:
    spec, bundle = put_problem
    solution = solve_reflected(bundle, spec, make_basis(2))
    path = solution.write_csv(str(tmp_path / 'steps.csv'))
    with open(path, newline='') as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == bundle.grid.steps + 1
    assert list(rows[0].keys()) == ['step', 't', 'mean_Y', 'mean_dK', 'skorokhod_partial_sum',
                                    'condition_number']


@pytest.mark.slow
def test_skorokhod_sum_shrinks_with_dt(put_market) -> None:
    profile, spec, x0 = to_log_problem(put_market)
    sums = []
    for steps in (64, 128, 256):
        bundle = simulate(profile, x0, TimeGrid(0.0, 1.0, steps), 20000, seed=31)
        solution = solve_reflected(bundle, spec, make_basis(2))
        assert solution.diagnostics['max_obstacle_violation'] == 0.0
        assert solution.diagnostics['K_nondecreasing']
        sums.append(solution.diagnostics['skorokhod_sum'])
    assert sums[0] > sums[1] > sums[2]
