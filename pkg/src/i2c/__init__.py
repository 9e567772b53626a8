"""Input inference for control: estimation and optimal control as one Gaussian inference problem."""

from .gauss import Gaussian, condition, kl_divergence, log_density, marginalize, propagate_affine
from .kernels import HAVE_COMPILED, backend, set_backend
from .model import (
    CostLikelihood,
    LinearDynamics,
    LinearObservation,
    QuadraticCost,
    Scenario,
    ScenarioError,
    cost_to_likelihood,
    load_scenario,
    optimality_loglik,
    scenario_from_dict,
)
from .solver import (
    EMTrace,
    JointBelief,
    PolicyGain,
    PolicyWarning,
    SolverError,
    e_step,
    elbo,
    em_solve,
    extract_policy,
    m_step_alpha,
)
from .unified import apply_feedback, build_time_varying, solve_unified

__all__ = [
    "Gaussian", "condition", "kl_divergence", "log_density", "marginalize", "propagate_affine",
    "HAVE_COMPILED", "backend", "set_backend",
    "CostLikelihood", "LinearDynamics", "LinearObservation", "QuadraticCost", "Scenario",
    "ScenarioError", "cost_to_likelihood", "load_scenario", "optimality_loglik", "scenario_from_dict",
    "EMTrace", "JointBelief", "PolicyGain", "PolicyWarning", "SolverError", "e_step", "elbo",
    "em_solve", "extract_policy", "m_step_alpha",
    "apply_feedback", "build_time_varying", "solve_unified",
]

__version__ = "0.1.0"
