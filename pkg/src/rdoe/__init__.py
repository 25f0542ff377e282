"""Robust A-optimal design of experiments for static nonlinear models.

The package computes experiment designs that stay informative when the
model parameters are uncertain: nominal, sequential, min-max, scenario,
two-stage and multi-stage designs, plus least-squares estimation and a
Monte-Carlo harness that compares the strategies against the design one
would choose knowing the true parameters.
"""

__version__ = "0.1.0"

from .design import (
    Design,
    ScenarioSet,
    ScenarioTree,
    StagedDesign,
    design_minmax,
    design_multi_stage,
    design_nominal,
    design_scenario,
    design_two_stage,
    sample_scenarios,
)
from .errors import (
    AllStartsFailed,
    ConfigError,
    DomainError,
    InconsistentTree,
    RdoeError,
    SingularFim,
    SingularModelPoint,
    UnderdeterminedData,
)
from .estimation import Dataset, Estimate, least_squares_estimate, simulate_measurement
from .evaluation import crystal_ball, evaluate_design, monte_carlo_compare
from .models import CASE1, CASE2, CASE3, CASE4, ModelSpec, NoiseModel, ParameterBox, get_model, register_model
from .optimizer import SolverConfig, minimize_boxed
from .protocols import SimulatedPlant, StopConfig, run_sequential, run_two_stage_protocol
from .statistics import CriterionConfig, a_criterion, assemble_fim, chi2_quantile, confidence_ellipsoid

__all__ = [
    "CASE1", "CASE2", "CASE3", "CASE4", "AllStartsFailed", "ConfigError", "CriterionConfig",
    "Dataset", "Design", "DomainError", "Estimate", "InconsistentTree", "ModelSpec", "NoiseModel",
    "ParameterBox", "RdoeError", "ScenarioSet", "ScenarioTree", "SimulatedPlant", "SingularFim",
    "SingularModelPoint", "SolverConfig", "StagedDesign", "StopConfig", "UnderdeterminedData",
    "a_criterion", "assemble_fim", "chi2_quantile", "confidence_ellipsoid", "crystal_ball",
    "design_minmax", "design_multi_stage", "design_nominal", "design_scenario", "design_two_stage",
    "evaluate_design", "get_model", "least_squares_estimate", "minimize_boxed",
    "monte_carlo_compare", "register_model", "run_sequential", "run_two_stage_protocol",
    "sample_scenarios", "simulate_measurement",
]
