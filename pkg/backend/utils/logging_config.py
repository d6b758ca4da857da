import logging
import logging.handlers
import os

_ROOT_LOGGER = 'rankflow'
_configured = False


def setup_logging(config, app=None):
    """Setup engine logging for the CLI and the API server"""
    global _configured
    logger = logging.getLogger(_ROOT_LOGGER)
    if _configured:
        return logger

    formatter = logging.Formatter(
        '%(asctime)s %(levelname)s [%(name)s] %(message)s'
    )

    # File handler with rotation
    if getattr(config, 'LOG_TO_FILE', False):
        log_dir = getattr(config, 'LOG_DIR', 'logs')
        os.makedirs(log_dir, exist_ok=True)
        file_handler = logging.handlers.RotatingFileHandler(
            os.path.join(log_dir, 'rankflow.log'), maxBytes=10240000, backupCount=10
        )
        file_handler.setFormatter(formatter)
        file_handler.setLevel(logging.INFO)
        logger.addHandler(file_handler)

    # Console handler for development; results go to stdout so logs use stderr
    if getattr(config, 'DEBUG', False):
        console_handler = logging.StreamHandler()
        console_handler.setFormatter(formatter)
        console_handler.setLevel(logging.DEBUG)
        logger.addHandler(console_handler)

    logger.setLevel(getattr(config, 'LOG_LEVEL', 'INFO'))
    if app is not None:
        for handler in logger.handlers:
            app.logger.addHandler(handler)
    logger.info('RankFlow engine started (version %s)', getattr(config, 'APP_VERSION', 'unknown'))
    _configured = True
    return logger


def get_logger(name):
    """Get logger instance under the engine namespace"""
    if not name.startswith(_ROOT_LOGGER):
        name = f'{_ROOT_LOGGER}.{name}'
    return logging.getLogger(name)
