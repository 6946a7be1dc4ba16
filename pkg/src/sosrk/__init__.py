"""Adaptive stability-optimized stochastic Runge-Kutta integrators.

Submodules
----------
noise      Brownian increments, iterated integrals and the rejection-safe path stack.
tableaus   Method coefficients and order-condition checks.
steppers   Single-step kernels (explicit, implicit, IMEX, Lamperti).
adaptive   Error-controlled integration, stiffness detection and switching.
stability  Drift and mean-square stability analysis.
problems   Test equations and application models.
harness    Convergence, work-precision and stability-raster experiments.
cli        The ``sosrk`` command-line tool.
"""
from .adaptive import Controller, integrate, integrate_ensemble, integrate_switching
from .errors import InputError, IntegrationFailure
from .problems import SDEProblem, get_problem
from .tableaus import builtin

__version__ = "0.1.0"

__all__ = [
    "Controller",
    "InputError",
    "IntegrationFailure",
    "SDEProblem",
    "builtin",
    "get_problem",
    "integrate",
    "integrate_ensemble",
    "integrate_switching",
]
