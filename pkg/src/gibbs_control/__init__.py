"""Trajectory optimization as gradient ascent on a smoothed Gibbs measure.

MPPI softmax updates, exponential-objective policy gradients, and discretized
reverse-diffusion sampling are three faces of the same update rule; this
package implements all three against shared primitives and ships the numerical
checks that verify their equivalences.
"""

from .core import (
    ControlSequence,
    DegenerateBatchError,
    EnergyModel,
    FunctionEnergy,
    GibbsMeasure,
    NoiseKernel,
    OutOfSupportError,
    PerturbationBatch,
    RunSeed,
    effective_sample_size,
    log_sum_exp,
    sample_perturbations,
    softmax_weights,
)
from .diffusion import KdeDataModel, NoiseSchedule, ScoreFunction
from .envs import CostModel, DynamicsModel, Environment, Trajectory, energy_of, make_environment, rollout
from .mppi import MppiConfig, mppi_control_loop, mppi_update, mppi_update_regularized
from .planner import GuidanceConfig, PlanLayout, PlanPrior, TrajectoryPlan, plan_and_execute
from .policygrad import GaussianOpenLoopPolicy, log_policy_density, pg_estimate, pg_exp_estimate
from .smoothed import QuadratureGrid, SmoothedEnergy, check_mppi_equivalence, gibbs_free_energy

__version__ = "0.1.0"

__all__ = [
    "ControlSequence",
    "CostModel",
    "DegenerateBatchError",
    "DynamicsModel",
    "EnergyModel",
    "Environment",
    "FunctionEnergy",
    "GaussianOpenLoopPolicy",
    "GibbsMeasure",
    "GuidanceConfig",
    "KdeDataModel",
    "MppiConfig",
    "NoiseKernel",
    "NoiseSchedule",
    "OutOfSupportError",
    "PerturbationBatch",
    "PlanLayout",
    "PlanPrior",
    "QuadratureGrid",
    "RunSeed",
    "ScoreFunction",
    "SmoothedEnergy",
    "Trajectory",
    "TrajectoryPlan",
    "check_mppi_equivalence",
    "effective_sample_size",
    "energy_of",
    "gibbs_free_energy",
    "log_policy_density",
    "log_sum_exp",
    "make_environment",
    "mppi_control_loop",
    "mppi_update",
    "mppi_update_regularized",
    "pg_estimate",
    "pg_exp_estimate",
    "plan_and_execute",
    "rollout",
    "sample_perturbations",
    "softmax_weights",
]
