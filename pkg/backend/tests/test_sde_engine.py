import numpy as np
import pandas as pd
import pytest

from models.coefficient_profile import CoefficientProfile
from models.path_bundle import TimeGrid
from services.sde_engine import (SDEEngine, estimate_local_times, moment_ratio, ranked_brownian_diagnostics,
                                 simulate, smoothed_simulate, strong_error, sup_distance)
from utils.error_handlers import SpecRejectedError, ValidationError
from utils.rng import path_normals


def test_path_streams_do_not_depend_on_blocking() -> None:
    whole = path_normals(11, 0, 10, (4, 2))
    split = np.concatenate([path_normals(11, 0, 3, (4, 2)), path_normals(11, 3, 10, (4, 2))])
    assert np.array_equal(whole, split)
    assert not np.array_equal(whole, path_normals(12, 0, 10, (4, 2)))


def test_simulation_identical_across_thread_counts(atlas_profile) -> None:
    grid = TimeGrid(0.0, 1.0, 8)
    one = SDEEngine(threads=1, block_size=7).simulate(atlas_profile, [1.0, 0.0, -1.0], grid, 50, seed=3)
    four = SDEEngine(threads=4, block_size=7).simulate(atlas_profile, [1.0, 0.0, -1.0], grid, 50, seed=3)
    assert np.array_equal(one.X, four.X)
    assert np.array_equal(one.dbeta, four.dbeta)


def test_bundle_invariants(atlas_profile) -> None:
    x0 = [1.0, 0.0, -1.0]
    bundle = simulate(atlas_profile, x0, TimeGrid(0.0, 1.0, 16), 200, seed=1)
    assert bundle.X.shape == (200, 17, 3)
    assert np.all(bundle.X[:, 0] == x0)
    assert np.all(np.diff(bundle.ranked, axis=-1) <= 0.0)
    assert np.array_equal(np.take_along_axis(bundle.X, bundle.order, axis=-1), bundle.ranked)
    assert np.array_equal(np.sort(bundle.perm, axis=-1), np.broadcast_to(np.arange(3), bundle.perm.shape))
    assert bundle.diagnostics['collisions']['min_gap'] >= 0.0


def test_equal_coefficients_give_independent_brownian_motions() -> None:
    profile = CoefficientProfile(delta=(0.3, 0.3), sigma=(2.0, 2.0))
    grid = TimeGrid(0.0, 1.0, 10)
    bundle = simulate(profile, [0.0, -1.0], grid, 100, seed=9)
    W = np.concatenate([np.zeros((100, 1, 2)), np.cumsum(bundle.dW, axis=1)], axis=1)
    expected = bundle.X[:, :1] + 0.3 * grid.times[None, :, None] + 2.0 * W
    assert np.allclose(bundle.X, expected)


def test_single_particle_is_brownian_with_drift() -> None:
    profile = CoefficientProfile(delta=(0.5,), sigma=(1.0,))
    grid = TimeGrid(0.0, 2.0, 4)
    bundle = simulate(profile, [0.0], grid, 20, seed=4)
    assert np.allclose(bundle.X[:, -1, 0], 1.0 + bundle.dW.sum(axis=1)[:, 0])


def test_nonconcave_profile_needs_override() -> None:
    profile = CoefficientProfile(delta=(0.0, 0.0, 0.0), sigma=(1.0, 0.5, 1.0))
    grid = TimeGrid(0.0, 1.0, 4)
    with pytest.raises(SpecRejectedError) as excinfo:
        simulate(profile, [1.0, 0.0, -1.0], grid, 10, seed=0)
    assert excinfo.value.report['violations'] == [2]
    assert 'ranks [2]' in str(excinfo.value)
    bundle = simulate(profile, [1.0, 0.0, -1.0], grid, 10, seed=0, allow_nonconcave=True)
    assert bundle.diagnostics['nonconcave_override']


def test_input_checks(atlas_profile) -> None:
    with pytest.raises(ValidationError):
        simulate(atlas_profile, [1.0, 0.0], TimeGrid(0.0, 1.0, 4), 10, seed=0)
    with pytest.raises(ValidationError):
        simulate(atlas_profile, [0.0, 1.0, 2.0], TimeGrid(0.0, 1.0, 4), 10, seed=0)
    with pytest.raises(ValidationError):
        SDEEngine(threads=0)


@pytest.mark.slow
def test_ranked_brownian_quadratic_variation() -> None:
    profile = CoefficientProfile(delta=(-0.5, 0.5), sigma=(1.0, 1.5))
    bundle = simulate(profile, [0.1, 0.0], TimeGrid(0.0, 1.0, 50), 10000, seed=21)
    report = ranked_brownian_diagnostics(bundle)
    assert max(report['diagonal_relative_error']) < 0.02
    assert abs(report['offdiagonal_z_scores'][0][1]) < 3.0


def test_nested_levels_share_brownian_paths(atlas_profile) -> None:
    grid = TimeGrid(0.0, 1.0, 32)
    bundles = SDEEngine().simulate_nested(atlas_profile, [1.0, 0.0, -1.0], grid, 300, seed=5, levels=3)
    assert [b.grid.steps for b in bundles] == [8, 16, 32]
    assert np.allclose(bundles[0].dW.sum(axis=1), bundles[-1].dW.sum(axis=1))
    first = strong_error(bundles[0], bundles[-1])
    second = strong_error(bundles[1], bundles[-1])
    assert second < first
    with pytest.raises(ValidationError):
        SDEEngine().simulate_nested(atlas_profile, [1.0, 0.0, -1.0], TimeGrid(0.0, 1.0, 6), 10, seed=5, levels=3)


def test_moment_and_continuity_bounds(atlas_profile) -> None:
    grid = TimeGrid(0.0, 1.0, 16)
    ratios = []
    for scale in (1.0, 10.0, 100.0):
        x0 = scale * np.array([1.0, 0.0, -1.0]) / np.sqrt(2.0)
        ratios.append(moment_ratio(simulate(atlas_profile, x0, grid, 400, seed=2), x0))
    assert max(ratios) < 20.0

    base = simulate(atlas_profile, [1.0, 0.0, -1.0], grid, 400, seed=2)
    distances = []
    for shift in (1.0, 0.1, 0.01):
        moved = simulate(atlas_profile, [1.0 + shift, 0.0, -1.0], grid, 400, seed=2)
        distances.append(sup_distance(base, moved, power=2.0))
    assert distances[0] > distances[1] > distances[2]


def test_smoothed_coefficients_approach_rank_coefficients() -> None:
    profile = CoefficientProfile(delta=(-0.5, 0.5), sigma=(1.0, 1.2))
    grid = TimeGrid(0.0, 1.0, 16)
    exact = simulate(profile, [3.0, -3.0], grid, 200, seed=8)
    errors = [sup_distance(smoothed_simulate(profile, [3.0, -3.0], grid, 200, seed=8, smoothing=m), exact)
              for m in (1.0, 10.0, 100.0)]
    assert errors[0] >= errors[1] >= errors[2]

    sharp = smoothed_simulate(profile, [30.0, -30.0], TimeGrid(0.0, 0.1, 4), 10, seed=8, smoothing=1e6)
    close = simulate(profile, [30.0, -30.0], TimeGrid(0.0, 0.1, 4), 10, seed=8)
    assert np.max(np.abs(sharp.X - close.X)) < 1e-6
    with pytest.raises(ValidationError):
        smoothed_simulate(profile, [1.0, 0.0], grid, 10, seed=8, smoothing=0.0)


def test_local_time_recovery(atlas_profile) -> None:
    bundle = simulate(atlas_profile, [0.5, 0.0, -0.5], TimeGrid(0.0, 1.0, 64), 500, seed=6)
    with_lt = estimate_local_times(bundle, atlas_profile)
    assert with_lt.local_time.shape == (500, 65, 2)
    assert np.all(np.diff(with_lt.local_time, axis=1) >= 0.0)
    assert np.all(with_lt.local_time[:, 0] == 0.0)
    assert with_lt.diagnostics['local_time']['clipped_mass'] >= 0.0
    assert np.all(with_lt.local_time[:, -1].mean(axis=0) > 0.0)


def test_path_dump_reads_back_exactly(tmp_path, atlas_profile) -> None:
    bundle = estimate_local_times(simulate(atlas_profile, [0.5, 0.0, -0.5], TimeGrid(0.0, 1.0, 4), 3, seed=6),
                                  atlas_profile)
    frame = pd.read_csv(bundle.write_csv(str(tmp_path / 'paths.csv')), float_precision='round_trip')
    assert list(frame.columns) == bundle.csv_header()
    assert len(frame) == 3 * 5
    assert np.array_equal(frame['X_2'].to_numpy(), bundle.X[:, :, 1].ravel())
    assert np.array_equal(frame['Lambda_1_2'].to_numpy(), bundle.local_time[:, :, 0].ravel())
    last = frame[frame['k'] == 4]
    assert last['dbeta_1'].isna().all()
    assert np.array_equal(frame.loc[frame['k'] == 0, 'dbeta_3'].to_numpy(), bundle.dbeta[:, 0, 2])


def test_distant_particles_accumulate_no_local_time(linear_profile) -> None:
    bundle = simulate(linear_profile, [5.0, -5.0], TimeGrid(0.0, 0.01, 16), 500, seed=6)
    with_lt = estimate_local_times(bundle, linear_profile)
    assert np.max(with_lt.local_time) < 1e-6


def test_local_time_at_a_collision_grows_with_the_horizon(linear_profile) -> None:
    means = []
    for T in (0.25, 0.5, 1.0):
        bundle = simulate(linear_profile, [0.0, 0.0], TimeGrid(0.0, T, 64), 2000, seed=9)
        means.append(float(estimate_local_times(bundle, linear_profile).local_time[:, -1, 0].mean()))
    assert 0.0 < means[0] < means[1] < means[2]
