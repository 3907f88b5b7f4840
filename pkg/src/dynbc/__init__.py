"""Bulk-surface parabolic problems with dynamic boundary conditions on the unit disk.

Forward solver, Carleman weight diagnostics and stability harnesses for the
recovery of radiative potentials and initial temperatures.
"""

from dynbc.errors import NumericalError, PreconditionError
from dynbc.grid import PolarGrid, State, build_grid, discrete_norm, surface_calculus
from dynbc.model import (
    AdmissibleBounds,
    Coefficients,
    DiscreteGenerator,
    PotentialPair,
    apply_L,
    apply_L_gamma,
    assemble_generator,
    check_admissible,
)
from dynbc.forward import (
    TimeWindow,
    Trajectory,
    positivity_bound_report,
    solve_forward,
    trotter_solve,
)

__version__ = "0.1.0"

__all__ = [
    "AdmissibleBounds",
    "Coefficients",
    "DiscreteGenerator",
    "NumericalError",
    "PolarGrid",
    "PotentialPair",
    "PreconditionError",
    "State",
    "TimeWindow",
    "Trajectory",
    "apply_L",
    "apply_L_gamma",
    "assemble_generator",
    "build_grid",
    "check_admissible",
    "discrete_norm",
    "positivity_bound_report",
    "solve_forward",
    "surface_calculus",
    "trotter_solve",
]
