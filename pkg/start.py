#!/usr/bin/env python3
# start.py - RankFlow API startup
import os
import sys

project_root = os.path.dirname(os.path.abspath(__file__))
backend_dir = os.path.join(project_root, 'backend')

if not os.path.exists(backend_dir):
    print(f'Backend directory not found: {backend_dir}')
    sys.exit(1)

os.chdir(backend_dir)
sys.path.insert(0, backend_dir)

try:
    from app import create_app

    env = os.environ.get('RANKFLOW_ENV', 'production')
    app = create_app(env)
    routes = sorted(rule.rule for rule in app.url_map.iter_rules() if rule.rule.startswith('/api'))
    port = int(os.environ.get('PORT', app.config['PORT']))

    print(f"RankFlow v{app.config['APP_VERSION']} ({env})")
    print(f'Routes: {", ".join(routes)}')
    print(f'Starting server on port {port}; health check at /api/health')

    app.run(host='0.0.0.0', port=port, debug=False, use_reloader=False, threaded=True)

except ImportError as e:
    print(f'Import error: {e}')
    print(f'Python path: {sys.path}')
    sys.exit(1)
except Exception as e:
    print(f'Startup error: {e}')
    import traceback
    traceback.print_exc()
    sys.exit(1)
