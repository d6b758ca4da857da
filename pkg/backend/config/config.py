import os

from dotenv import load_dotenv

load_dotenv()


def _env_bool(name, default):
    return os.environ.get(name, default).lower() == 'true'


class Config:
    APP_VERSION = '1.0.0'
    LOG_DIR = os.environ.get('RANKFLOW_LOG_DIR', 'logs')
    LOG_LEVEL = os.environ.get('RANKFLOW_LOG_LEVEL', 'INFO')
    LOG_TO_FILE = _env_bool('RANKFLOW_LOG_TO_FILE', 'true')
    OUTPUT_DIR = os.environ.get('RANKFLOW_OUTPUT_DIR', 'out')
    # round-trips every double
    CSV_FLOAT_FORMAT = '%.17g'

    # Numerics defaults; experiment documents override these per run
    DEFAULT_THREADS = int(os.environ.get('RANKFLOW_THREADS', 1))
    PATH_BLOCK_SIZE = int(os.environ.get('RANKFLOW_PATH_BLOCK_SIZE', 4096))
    DEFAULT_BASIS_DEGREE = int(os.environ.get('RANKFLOW_BASIS_DEGREE', 2))
    VALIDATION_SAMPLES = int(os.environ.get('RANKFLOW_VALIDATION_SAMPLES', 256))
    VALIDATION_RADIUS = float(os.environ.get('RANKFLOW_VALIDATION_RADIUS', 5.0))
    TOLERANCE_ABS = float(os.environ.get('RANKFLOW_TOLERANCE_ABS', 1e-3))
    TOLERANCE_K = float(os.environ.get('RANKFLOW_TOLERANCE_K', 3.0))

    # API guard so a single request cannot exhaust the host
    MAX_PATHS = int(os.environ.get('RANKFLOW_MAX_PATHS', 200000))
    PORT = int(os.environ.get('PORT', 8000))
    DEBUG = False
    TESTING = False

    @classmethod
    def to_dict(cls):
        return {key: getattr(cls, key) for key in dir(cls) if key.isupper()}


class DevelopmentConfig(Config):
    DEBUG = True
    LOG_LEVEL = 'DEBUG'


class ProductionConfig(Config):
    DEBUG = False


class TestingConfig(Config):
    TESTING = True
    DEBUG = True
    LOG_TO_FILE = False
    VALIDATION_SAMPLES = 128
    MAX_PATHS = 50000


_CONFIGS = {
    'development': DevelopmentConfig,
    'production': ProductionConfig,
    'testing': TestingConfig,
}


def get_config(name=None):
    """Resolve a config class by name, falling back to RANKFLOW_ENV."""
    name = (name or os.environ.get('RANKFLOW_ENV', 'production')).lower()
    if name not in _CONFIGS:
        raise ValueError(f"Unknown configuration '{name}'. Valid options: {sorted(_CONFIGS)}")
    return _CONFIGS[name]
