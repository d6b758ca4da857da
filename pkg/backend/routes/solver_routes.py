from flask import Blueprint, current_app, jsonify, request

from models.coefficient_profile import CoefficientProfile
from models.experiment_config import ExperimentConfig
from models.market_spec import MarketSpec
from models.problem_spec import ProblemSpec
from services.bsde_solver import estimate_solution
from services.harness_service import resolve_problem, validate_config
from services.pricing_service import binomial_oracle, price_american
from utils.decorators import handle_errors
from utils.error_handlers import ValidationError
from utils.validators import (create_validation_report, validate_experiment_data, validate_market,
                              validate_market_data, validate_profile_data, validate_spec)

solver_bp = Blueprint('solver', __name__)


def _json_body():
    data = request.get_json(silent=True)
    if not isinstance(data, dict):
        raise ValidationError('Request body must be a JSON object')
    return data


def _rejected(report):
    current_app.logger.error(f'Validation failed:\n{create_validation_report(report)}')
    return jsonify({
        'error': 'Validation failed',
        'message': 'Invalid document provided',
        'details': report['errors'],
        'warnings': report.get('warnings', []),
    }), 400


def _experiment(data):
    """Structural check, then build; path counts above MAX_PATHS are refused."""
    report = validate_experiment_data(data)
    if not report['valid']:
        return None, _rejected(report)
    config = ExperimentConfig.from_dict(data)
    limit = current_app.config['MAX_PATHS']
    if config.numerics.n_paths > limit:
        raise ValidationError(f'n_paths={config.numerics.n_paths} exceeds the API limit of {limit}',
                              details={'key': 'numerics.n_paths', 'limit': limit})
    return config, None


@solver_bp.route('/validate-spec', methods=['POST'])
@handle_errors
def validate_spec_route():
    """Hypothesis report for a problem or a market; never raises on a failed hypothesis"""
    data = _json_body()
    seed = int(data.get('seed', 0))
    samples = int(data.get('samples', current_app.config['VALIDATION_SAMPLES']))

    if 'market' in data:
        structure = validate_market_data(data['market'])
        if not structure['valid']:
            return _rejected(structure)
        profile = None if 'profile' in data['market'] else CoefficientProfile.from_dict(data)
        market = MarketSpec.from_dict(data['market'], profile=profile,
                                      t0=float(data.get('t0', 0.0)), T=float(data.get('T', 1.0)))
        report = validate_market(market, samples, seed)
    else:
        structure = validate_profile_data(data)
        if not structure['valid']:
            return _rejected(structure)
        profile = CoefficientProfile.from_dict(data)
        spec = ProblemSpec.from_dict(data, profile=profile, maturity=float(data.get('T', 1.0)))
        report = validate_spec(spec, profile, samples, seed, horizon=float(data.get('T', 1.0)))

    response = {'valid': report['valid'], 'report': report}
    if current_app.debug:
        response['report_text'] = create_validation_report(report)
    return jsonify(response)


@solver_bp.route('/estimate-u', methods=['POST'])
@handle_errors
def estimate_u_route():
    """u(t0, x0) from the reflected solver for an experiment document"""
    config, error = _experiment(_json_body())
    if error:
        return error
    validation = validate_config(config)
    profile, spec, x0 = resolve_problem(config)
    solution, _ = estimate_solution(profile, spec, x0, config.t0, config.T, config.numerics)
    return jsonify({
        'u0': solution.u0,
        'stderr': solution.stderr,
        'config_sha256': config.config_hash,
        'diagnostics': solution.diagnostics,
        'validation': validation,
    })


@solver_bp.route('/price-american', methods=['POST'])
@handle_errors
def price_american_route():
    config, error = _experiment(_json_body())
    if error:
        return error
    if not config.is_market:
        raise ValidationError('price-american needs a market section', details={'key': 'market'})
    result = price_american(config.market, config.numerics)
    result['config_sha256'] = config.config_hash
    return jsonify(result)


@solver_bp.route('/binomial', methods=['POST'])
@handle_errors
def binomial_route():
    """CRR tree price for a single stock"""
    data = _json_body()
    missing = [key for key in ('p', 'strike', 'r', 'sigma', 'T') if key not in data]
    if missing:
        raise ValidationError(f"Missing required field: {', '.join(missing)}", details={'keys': missing})
    price = binomial_oracle(float(data['p']), float(data['strike']), float(data['r']), float(data['sigma']),
                            float(data['T']), int(data.get('steps', 2000)),
                            kind=data.get('kind', 'put'), style=data.get('style', 'american'))
    return jsonify({'price': price, 'steps': int(data.get('steps', 2000)),
                    'kind': data.get('kind', 'put'), 'style': data.get('style', 'american')})
