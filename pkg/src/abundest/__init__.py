"""Relative-abundance estimation from marker-gene count data with
detection effects, contamination and boundary-valid inference."""

from .likelihood import (INFEASIBLE, InfeasibleMeanError, Objective,
                         profile_gamma, profile_loglik, profile_objective)
from .model import (CountMatrix, DesignSet, DomainError, ModelSpec, ParamMask,
                    ParamSet, ShapeError, make_mask, mean_gradient,
                    mean_model, rmse)
from .reweight import WeightTable, estimate_weights, pava_isotonic
from .solver import (FitResult, SolverError, SolverOptions, barrier_solve,
                     fit)
from .inference import (BootstrapConfig, BootstrapDraws, BootstrapError,
                        TestSpec, bootstrap_params, dirichlet_weights, lrt,
                        marginal_ci, null_project)
from .simulate import SimScenario, make_beta_star, make_specimens, simulate

__version__ = "0.1.0"

__all__ = [
    "CountMatrix", "DesignSet", "ParamSet", "ParamMask", "ModelSpec",
    "make_mask", "mean_model", "mean_gradient", "rmse",
    "ShapeError", "DomainError",
    "profile_gamma", "profile_objective", "profile_loglik", "Objective",
    "INFEASIBLE", "InfeasibleMeanError",
    "WeightTable", "estimate_weights", "pava_isotonic",
    "fit", "barrier_solve", "FitResult", "SolverOptions", "SolverError",
    "BootstrapConfig", "BootstrapDraws", "BootstrapError", "TestSpec",
    "bootstrap_params", "dirichlet_weights", "marginal_ci", "null_project",
    "lrt",
    "SimScenario", "make_beta_star", "make_specimens", "simulate",
]
