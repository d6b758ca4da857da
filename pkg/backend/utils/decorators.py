import time
from functools import wraps

from flask import current_app, jsonify

from .error_handlers import RankFlowError
from .logging_config import get_logger


def handle_errors(f):
    """Decorator to turn engine errors into JSON responses"""
    @wraps(f)
    def decorated_function(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except RankFlowError as e:
            current_app.logger.warning(f'{type(e).__name__}: {e.message}')
            return jsonify(e.to_dict()), e.status_code
        except (KeyError, TypeError, ValueError) as e:
            current_app.logger.error(f'Value error: {e}')
            return jsonify({'error': 'Invalid data', 'message': str(e), 'status_code': 400}), 400
        except Exception as e:
            current_app.logger.error(f'Unexpected error: {e}')
            return jsonify({'error': 'Internal server error',
                            'message': 'An unexpected error occurred',
                            'status_code': 500}), 500
    return decorated_function


def timed(label=None):
    """Log the wall time of a service call"""
    def decorator(f):
        logger = get_logger(f.__module__)
        name = label or f.__qualname__

        @wraps(f)
        def wrapper(*args, **kwargs):
            start_time = time.perf_counter()
            result = f(*args, **kwargs)
            logger.info(f'{name} finished in {time.perf_counter() - start_time:.3f}s')
            return result
        return wrapper
    return decorator
