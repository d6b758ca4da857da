from flask import jsonify


class RankFlowError(Exception):
    """Base class for engine errors"""

    status_code = 500

    def __init__(self, message, details=None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def to_dict(self):
        return {
            'error': type(self).__name__,
            'message': self.message,
            'status_code': self.status_code,
            'details': self.details,
        }


class ValidationError(RankFlowError, ValueError):
    """Malformed input: non-finite data, wrong dimensions, unknown registry kinds"""

    status_code = 400


class SpecRejectedError(ValidationError):
    """A problem or market failed its hypothesis checks"""

    status_code = 422

    def __init__(self, message, report=None):
        super().__init__(message, details={'report': report} if report else None)
        self.report = report


class NumericsError(RankFlowError, RuntimeError):
    """Step size, mesh ratio or linear solve failure"""

    status_code = 422


class ToleranceFailure(RankFlowError):
    """A cross-check verdict fell outside its configured tolerance"""

    status_code = 422


def register_error_handlers(app):
    """Register global error handlers"""

    @app.errorhandler(RankFlowError)
    def engine_error(error):
        app.logger.warning(f'{type(error).__name__}: {error.message}')
        return jsonify(error.to_dict()), error.status_code

    @app.errorhandler(400)
    def bad_request(error):
        return jsonify({
            'error': 'Bad Request',
            'message': 'The request could not be understood by the server',
            'status_code': 400
        }), 400

    @app.errorhandler(404)
    def not_found(error):
        return jsonify({
            'error': 'Not Found',
            'message': 'The requested resource was not found',
            'status_code': 404
        }), 404

    @app.errorhandler(500)
    def internal_server_error(error):
        app.logger.error(f'Server Error: {error}')
        return jsonify({
            'error': 'Internal Server Error',
            'message': 'An unexpected error occurred',
            'status_code': 500
        }), 500
