import os
from importlib import metadata
from datetime import datetime, timezone

from flask import Blueprint, current_app, jsonify

from utils.decorators import handle_errors

health_bp = Blueprint('health', __name__)


@health_bp.route('/health', methods=['GET'])
@handle_errors
def health_check():
    """Engine health: output and log directories plus the numeric stack"""
    log_dir = current_app.config.get('LOG_DIR', 'logs')
    output_dir = current_app.config.get('OUTPUT_DIR', 'out')

    directories = {}
    for name, path in (('logs', log_dir), ('output', output_dir)):
        exists = os.path.exists(path)
        directories[name] = {
            'exists': exists,
            'writable': os.access(path, os.W_OK) if exists else os.access(os.path.dirname(os.path.abspath(path)), os.W_OK),
            'path': path,
        }

    packages = {}
    for package in ('numpy', 'scipy', 'pandas', 'flask'):
        try:
            packages[package] = {'available': True, 'version': metadata.version(package)}
        except metadata.PackageNotFoundError:
            packages[package] = {'available': False, 'version': None}

    healthy = all(p['available'] for p in packages.values()) and all(d['writable'] for d in directories.values())
    return jsonify({
        'status': 'healthy' if healthy else 'degraded',
        'timestamp': datetime.now(timezone.utc).isoformat(),
        'version': current_app.config.get('APP_VERSION'),
        'directories': directories,
        'packages': packages,
        'config': {
            'debug_mode': current_app.debug,
            'max_paths': current_app.config.get('MAX_PATHS'),
            'path_block_size': current_app.config.get('PATH_BLOCK_SIZE'),
            'port': current_app.config.get('PORT'),
        },
    })
