"""Multi-shape optimization of obstacles in a 2D Navier-Stokes channel flow.

Modules: ``geometry`` (glued polyline shapes), ``mesh`` (triangulation and
remeshing), ``fem`` (Taylor-Hood spaces and solvers), ``flow`` (state,
adjoint, shape derivative), ``optimize`` (elasticity-metric gradient descent
with augmented Lagrangian constraints) and ``cli``.
"""

__version__ = "0.1.0"
