"""Normalized ground states of Choquard equations and their semiclassical limit."""

from .functional import ChoquardParams, EnergyBreakdown, ParameterError, energy, lagrange_multiplier
from .grid import GridSpec, ScalarField, make_grid
from .limit import LimitSystemSpec, MassSplit, lambda_zero, optimal_split, sigma_at_optimal
from .solver import GroundStateResult, SolverConfig, initial_guess, solve_ground_state

__version__ = "0.1.0"

__all__ = [
    "ChoquardParams",
    "EnergyBreakdown",
    "ParameterError",
    "energy",
    "lagrange_multiplier",
    "GridSpec",
    "ScalarField",
    "make_grid",
    "LimitSystemSpec",
    "MassSplit",
    "lambda_zero",
    "optimal_split",
    "sigma_at_optimal",
    "GroundStateResult",
    "SolverConfig",
    "initial_guess",
    "solve_ground_state",
]
