from .logging_config import setup_logging, get_logger
from .error_handlers import (NumericsError, RankFlowError, SpecRejectedError, ToleranceFailure,
                             ValidationError, register_error_handlers)
from .decorators import handle_errors, timed

__all__ = [
    'setup_logging', 'get_logger', 'register_error_handlers',
    'RankFlowError', 'ValidationError', 'SpecRejectedError', 'NumericsError', 'ToleranceFailure',
    'handle_errors', 'timed'
]
