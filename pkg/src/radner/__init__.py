"""Radner equilibrium lab: quadratic BSDE systems for incomplete-market
equilibria with exponential utilities, solved as semilinear parabolic PDEs and
validated against closed forms and Monte Carlo."""
from .economy import MarketModel, ScaledEconomy, make_gaussian_economy, make_put_option_economy, scale_economy
from .generator import RegularizationParams, check_structural_conditions, f_raw, f_reg
from .pde_solver import Grid, SolutionField, SolverOptions, build_grid, refine_study, solve
from .equilibrium import extract, positions
from .config import ExperimentConfig, parse_config

__version__ = "0.1.0"

__all__ = [
    "MarketModel", "ScaledEconomy", "make_gaussian_economy", "make_put_option_economy", "scale_economy",
    "RegularizationParams", "check_structural_conditions", "f_raw", "f_reg",
    "Grid", "SolutionField", "SolverOptions", "build_grid", "refine_study", "solve",
    "extract", "positions", "ExperimentConfig", "parse_config",
]
