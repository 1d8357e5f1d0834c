"""Dilation calculus and L^infinity tools for quasiconformal immersions."""
from __future__ import annotations

__version__ = "0.1.0"

from .dilation import dilation, dilation_gradient, dilation_hessian_reduced, dilation_jet
from .errors import (
    ConfigurationError,
    DomainViolation,
    InitializationError,
    QCError,
    SolverStall,
)
from .grid import Grid, MapField, sample_map
from .maps import AnalyticMap, get_map, list_maps
from .phase import PhaseMap, phase_map
from .residuals import Jet2, q_infinity_residual
from .solver import SolveConfig, SolveResult, solve
from .tensor import ahlfors, contract, projections
from .variations import VariationTrial, counterexample_report, normal_free_trial, rank_one_trial

__all__ = [
    "__version__", "dilation", "dilation_gradient", "dilation_hessian_reduced", "dilation_jet",
    "ConfigurationError", "DomainViolation", "InitializationError", "QCError", "SolverStall",
    "Grid", "MapField", "sample_map", "AnalyticMap", "get_map", "list_maps", "PhaseMap", "phase_map",
    "Jet2", "q_infinity_residual", "SolveConfig", "SolveResult", "solve", "ahlfors", "contract",
    "projections", "VariationTrial", "counterexample_report", "normal_free_trial", "rank_one_trial",
]
