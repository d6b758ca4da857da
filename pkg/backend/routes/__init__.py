from .health_routes import health_bp
from .solver_routes import solver_bp


def register_blueprints(app):
    """Mount every blueprint under /api"""
    app.register_blueprint(health_bp, url_prefix='/api')
    app.register_blueprint(solver_bp, url_prefix='/api')
