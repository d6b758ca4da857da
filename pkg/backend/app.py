#!/usr/bin/env python3
# backend/app.py - RankFlow JSON API
import os
import sys

from flask import Flask

# Add current directory to Python path for imports
current_dir = os.path.dirname(os.path.abspath(__file__))
if current_dir not in sys.path:
    sys.path.insert(0, current_dir)

from config import get_config  # noqa: E402
from routes import register_blueprints  # noqa: E402
from utils.error_handlers import register_error_handlers  # noqa: E402
from utils.logging_config import setup_logging  # noqa: E402


def create_app(config_name=None):
    """Create and configure the Flask application"""
    config = get_config(config_name)
    app = Flask(__name__)
    app.config.from_object(config)
    app.config['JSON_SORT_KEYS'] = True

    setup_logging(config, app)
    register_error_handlers(app)
    register_blueprints(app)

    app.logger.info(f'RankFlow API ready ({len(list(app.url_map.iter_rules()))} routes)')
    return app


if __name__ == '__main__':
    app = create_app(os.environ.get('RANKFLOW_ENV', 'development'))
    app.run(host='0.0.0.0', port=app.config['PORT'], debug=app.config['DEBUG'])
