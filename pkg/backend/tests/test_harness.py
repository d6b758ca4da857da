import csv
import json
import os

import pytest

from models.experiment_config import ExperimentConfig
from services.harness_service import (convergence_table, cross_validate, pde_grid, require_verdict,
                                      run_scenario, write_manifest, write_table)
from utils.error_handlers import SpecRejectedError, ToleranceFailure, ValidationError


@pytest.fixture
def small_put_config(put_document) -> ExperimentConfig:
    put_document['numerics'].update({'n_paths': 2000, 'time_steps': 16,
                                     'pde': {'space_steps': [100], 'time_steps': 50, 'radius': 2.0}})
    return ExperimentConfig.from_dict(put_document)


def test_cross_validation_on_linear_problem(small_linear_config) -> None:
    report = cross_validate(small_linear_config)
    assert report['passed']
    assert report['evaluated'] == 2
    assert report['excluded'] == 0
    first = report['probes'][0]
    assert first['pde'] == pytest.approx(0.2, abs=1e-8)
    assert first['tolerance'] == pytest.approx(0.001 + 4.0 * first['stderr'])
    assert report['probes'][1]['pde'] == pytest.approx(1.1, abs=1e-8)
    assert report['config_sha256'] == small_linear_config.config_hash
    assert 'oracle' not in report


def test_failed_verdict_raises_tolerance_failure(linear_document) -> None:
    linear_document['numerics'].update({'n_paths': 500, 'time_steps': 8,
                                        'pde': {'space_steps': [20, 20], 'time_steps': 10, 'radius': 4.0},
                                        'tolerance': {'abs': 0.0, 'k': 0.0}})
    report = cross_validate(ExperimentConfig.from_dict(linear_document))
    assert not report['passed']
    with pytest.raises(ToleranceFailure) as excinfo:
        require_verdict(report, report['passed'], 'cross-validate')
    assert excinfo.value.details['result'] is report
    assert len(excinfo.value.details['failed_points']) == 2
    assert 'at 2 evaluation point(s)' in excinfo.value.message
    assert require_verdict(report, True, 'cross-validate') is report


def test_probes_outside_the_domain_are_excluded(linear_document) -> None:
    linear_document['numerics'].update({'n_paths': 500, 'time_steps': 8,
                                        'pde': {'space_steps': [10, 10], 'time_steps': 4, 'radius': 2.0}})
    linear_document['probes'].append({'t': 0.0, 'x': [30.0, 29.0]})
    report = cross_validate(ExperimentConfig.from_dict(linear_document))
    assert report['excluded'] == 1
    assert report['probes'][-1]['reason'] == 'outside PDE domain'
    assert report['evaluated'] == 2


def test_rejected_problem_stops_cross_validation(linear_document) -> None:
    linear_document['terminal'] = {'kind': 'constant', 'value': 0.0}
    linear_document['obstacle'] = {'kind': 'constant', 'value': 1.0}
    with pytest.raises(SpecRejectedError):
        cross_validate(ExperimentConfig.from_dict(linear_document))


def test_pde_grid_refuses_large_dimensions(small_linear_config) -> None:
    from models.rank_view import SimplexPoint
    with pytest.raises(ValidationError):
        pde_grid(small_linear_config, SimplexPoint.from_coords([3.0, 2.0, 1.0, 0.0]))


def test_ladder_needs_three_doubling_levels(linear_document) -> None:
    linear_document['numerics']['ladder'] = {'dt': [16, 32]}
    with pytest.raises(ValidationError) as excinfo:
        convergence_table(ExperimentConfig.from_dict(linear_document), 'dt')
    assert excinfo.value.details['key'] == 'numerics.ladder.dt'

    linear_document['numerics']['ladder'] = {'dt': [16, 32, 48]}
    with pytest.raises(ValidationError):
        convergence_table(ExperimentConfig.from_dict(linear_document), 'dt')

    with pytest.raises(ValidationError):
        convergence_table(ExperimentConfig.from_dict(linear_document), 'space')


def test_dt_table(linear_document) -> None:
    linear_document['numerics'].update({'n_paths': 1000, 'ladder': {'dt': [8, 16, 32]}})
    table = convergence_table(ExperimentConfig.from_dict(linear_document), 'dt')
    rows = table['rows']
    assert [r['time_steps'] for r in rows] == [8, 16, 32]
    assert rows[0]['difference'] is None
    assert rows[1]['difference'] == pytest.approx(rows[1]['strong_error'] - rows[0]['strong_error'])
    assert rows[0]['strong_error'] > rows[-1]['strong_error']
    assert all(r['K_nondecreasing'] for r in rows)
    assert table['statistic'] == 'strong_error'


def test_paths_table(small_linear_config) -> None:
    config = ExperimentConfig.from_dict(dict(small_linear_config.document,
                                             numerics=dict(small_linear_config.document['numerics'],
                                                           ladder={'paths': [250, 1000, 4000]})))
    table = convergence_table(config, 'paths')
    stderrs = [r['stderr'] for r in table['rows']]
    assert stderrs[0] > stderrs[1] > stderrs[2]
    assert table['rows'][0]['stderr_ratio'] is None
    assert table['details']['ratio_band'] == [1.4, 2.6]


def test_mesh_table_on_put(small_put_config) -> None:
    config = ExperimentConfig.from_dict(dict(small_put_config.document,
                                             numerics=dict(small_put_config.document['numerics'],
                                                           ladder={'mesh': [25, 50, 100]})))
    table = convergence_table(config, 'mesh')
    errors = [r['error'] for r in table['rows']]
    assert errors[0] > errors[1] > errors[2]
    assert table['verdict']
    assert table['details']['reference_space_steps'] == 200
    assert [r['time_steps'] for r in table['rows']] == [50, 100, 200]


def test_penalty_table_approaches_reflected(small_put_config, tmp_path) -> None:
    table = convergence_table(small_put_config, 'penalty')
    assert [r['penalty'] for r in table['rows']] == [10.0, 100.0, 1000.0]
    assert table['verdict']
    assert table['details']['relative_gap_last'] < 0.02

    path = write_table(table, str(tmp_path / 'penalty.csv'))
    with open(path, newline='') as f:
        rows = list(csv.DictReader(f))
    assert len(rows) == 3
    assert float(rows[2]['penalty']) == 1000.0


def test_put_cross_validation_reports_oracle_gaps(small_put_config) -> None:
    report = cross_validate(small_put_config)
    oracle = report['oracle']
    stderr = report['probes'][0]['stderr']
    assert oracle['price'] == pytest.approx(6.09, abs=0.01)
    assert oracle['pde_relative_gap'] < 0.05
    assert oracle['mc_relative_gap'] < 0.01 + 3.0 * stderr / oracle['price']


@pytest.mark.slow
def test_put_cross_validation_within_one_percent(put_document) -> None:
    put_document['numerics'].update({'n_paths': 100000, 'time_steps': 64,
                                     'pde': {'space_steps': [200], 'time_steps': 200, 'radius': 2.0}})
    report = cross_validate(ExperimentConfig.from_dict(put_document))
    assert report['passed']
    assert report['oracle']['mc_relative_gap'] < 0.01
    assert report['oracle']['pde_relative_gap'] < 0.01


def test_run_scenario_is_reproducible(tmp_path, small_linear_config) -> None:
    first = run_scenario(small_linear_config, str(tmp_path / 'a'))
    second = run_scenario(small_linear_config, str(tmp_path / 'b'))
    assert first['passed']
    files = first['manifest']['files']
    assert set(files) == {'validation.json', 'bsde_steps.csv', 'bsde.json', 'cross_validation.json',
                          'convergence_dt.csv'}
    assert files == second['manifest']['files']

    with open(tmp_path / 'a' / 'manifest.json') as f:
        manifest = json.load(f)
    assert manifest['config_sha256'] == small_linear_config.config_hash
    assert manifest['seeds'] == {'master': 7}
    assert set(manifest['versions']) == {'rankflow', 'python', 'numpy', 'scipy', 'pandas'}


def test_run_scenario_dumps_paths(tmp_path, linear_document) -> None:
    linear_document['numerics'].update({'n_paths': 50, 'time_steps': 4, 'ladder': {},
                                        'pde': {'space_steps': [10, 10], 'time_steps': 4, 'radius': 2.0},
                                        'tolerance': {'abs': 0.001, 'k': 6.0}})
    result = run_scenario(ExperimentConfig.from_dict(linear_document), str(tmp_path), dump_paths=True)
    assert 'paths.csv' in result['manifest']['files']
    assert os.path.exists(tmp_path / 'paths.csv')


def test_manifest_has_no_wall_clock_data(tmp_path, small_linear_config) -> None:
    path = tmp_path / 'note.txt'
    path.write_text('x')
    manifest = write_manifest(small_linear_config, str(tmp_path), [str(path)])
    text = json.dumps(manifest)
    assert 'timestamp' not in text
    assert manifest['files'] == {'note.txt': '2d711642b726b04401627ca9fbac32f5c8530fb1903cc4db02258717921a4881'}
