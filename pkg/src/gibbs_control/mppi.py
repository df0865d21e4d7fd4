"""MPPI controllers: vanilla, prior-regularized, and nominal-control variants.

The vanilla update is the softmax-weighted perturbation average

    U' = U + sum_i w_i E_i,   w_i = exp(E(U + E_i)/tau) / sum_j exp(E(U + E_j)/tau),

with all exponentials routed through log-sum-exp. The regularized variant adds
-(u_t - nominal_t)^T Sigma^{-1} eps_t to the softmax exponent, which penalizes
perturbations aligned with the current control offset from the nominal.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    ControlSequence,
    EnergyModel,
    NoiseKernel,
    PerturbationBatch,
    RunSeed,
    effective_sample_size,
    sample_perturbations,
)
from .envs import CostModel, DynamicsModel, RolloutEnergy, Trajectory, rollout

__all__ = [
    "MppiConfig",
    "mppi_direction",
    "mppi_update",
    "mppi_update_regularized",
    "mppi_control_loop",
    "ControlLoopResult",
]


@dataclass(frozen=True)
class MppiConfig:
    """Sampling and loop parameters for one MPPI controller."""

    kernel: NoiseKernel
    samples: int = 1024
    horizon: int = 30
    iterations: int = 1
    nominal: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.samples < 1:
            raise ValueError("need at least one sample per update")
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        if self.iterations < 1:
            raise ValueError("at least one update iteration per step is required")
        if self.nominal is not None:
            nom = np.asarray(self.nominal, dtype=float)
            if nom.shape != (self.horizon, self.kernel.dim):
                raise ValueError("nominal controls must have shape (horizon, control dim)")
            object.__setattr__(self, "nominal", nom)


def _as_controls(u, dim: int) -> ControlSequence:
    if isinstance(u, ControlSequence):
        return u
    arr = np.asarray(u, dtype=float)
    if arr.ndim <= 1:
        return ControlSequence.from_flat(arr, dim)
    return ControlSequence(arr)


def _evaluate_batch(energy: EnergyModel, u: ControlSequence,
                    batch: PerturbationBatch) -> np.ndarray:
    candidates = u.values[None, ...] + batch.perturbations
    flat = candidates.reshape(batch.n_samples, -1)
    return np.asarray(energy.evaluate_batch(flat), dtype=float)


def mppi_direction(batch: PerturbationBatch, tau: float | None = None) -> np.ndarray:
    """Weighted perturbation average for a batch that already has energies.

    When tau is given, weights are recomputed as softmax(energies / tau);
    otherwise the batch's stored weights are used.
    """
    if tau is not None:
        if batch.energies is None:
            raise ValueError("batch has no energies")
        batch = batch.with_energies(batch.energies, tau)
    return batch.direction()


def mppi_update(u, energy: EnergyModel, cfg: MppiConfig,
                seed: RunSeed) -> tuple[ControlSequence, PerturbationBatch]:
    """One vanilla MPPI update; returns the new controls and the scored batch."""
    u = _as_controls(u, cfg.kernel.dim)
    batch = sample_perturbations(cfg.kernel, u.horizon, cfg.samples, seed)
    energies = _evaluate_batch(energy, u, batch)
    batch = batch.with_energies(energies, cfg.kernel.tau)
    return ControlSequence(u.values + batch.direction()), batch


def mppi_update_regularized(u, energy: EnergyModel, cfg: MppiConfig,
                            seed: RunSeed) -> tuple[ControlSequence, PerturbationBatch]:
    """MPPI update with a Gaussian-prior regularizer in the softmax exponent.

    The exponent per sample is E(U + E_i)/tau - sum_t (u_t - nominal_t)^T
    Sigma^{-1} eps_{t,i}; the inner-product term carries no 1/tau. A nominal
    equal to U zeroes the regularizer and reproduces the vanilla update
    sample-for-sample; the default nominal is zero (the zero-mean-prior form).
    """
    u = _as_controls(u, cfg.kernel.dim)
    batch = sample_perturbations(cfg.kernel, u.horizon, cfg.samples, seed)
    energies = _evaluate_batch(energy, u, batch)
    nominal = cfg.nominal if cfg.nominal is not None else np.zeros_like(u.values)
    offset = cfg.kernel.apply_inverse(u.values - nominal)
    penalty = np.einsum("tm,ntm->n", offset, batch.perturbations)
    exponents = energies / cfg.kernel.tau - penalty
    batch = PerturbationBatch(batch.perturbations, energies=energies).with_exponents(exponents)
    return ControlSequence(u.values + batch.direction()), batch


@dataclass(frozen=True)
class ControlLoopResult:
    """Receding-horizon log: per-step plans, the executed path, and diagnostics."""

    plans: list[Trajectory]
    executed: Trajectory
    diagnostics: list[dict]


def mppi_control_loop(dynamics: DynamicsModel, cost: CostModel, x0: np.ndarray,
                      cfg: MppiConfig, steps: int, seed: RunSeed,
                      regularized: bool = False) -> ControlLoopResult:
    """Run MPPI receding-horizon: optimize, execute the first control, shift.

    Per environment step the update runs cfg.iterations times, the first
    control is applied to the real system, and the sequence is shifted left
    with a zero tail. Diagnostics rows carry effective sample size, max
    weight, and best energy for every iteration.
    """
    if steps < 1:
        raise ValueError("need at least one environment step")
    update = mppi_update_regularized if regularized else mppi_update
    u = ControlSequence.zeros(cfg.horizon, cfg.kernel.dim)
    x = np.asarray(x0, dtype=float)

    plans: list[Trajectory] = []
    diagnostics: list[dict] = []
    executed_states = [x.copy()]
    executed_controls = []
    executed_cost = 0.0

    for step_idx in range(steps):
        energy = RolloutEnergy(dynamics, cost, x)
        for it in range(cfg.iterations):
            u, batch = update(u, energy, cfg, seed.derive(step_idx, it))
            diagnostics.append({
                "step": step_idx,
                "iteration": it,
                "best_energy": float(np.max(batch.energies)),
                "mean_energy": float(np.mean(batch.energies)),
                "ess": effective_sample_size(batch.weights),
                "max_weight": float(np.max(batch.weights)),
            })
        plans.append(rollout(dynamics, cost, x, u))
        u0 = u.values[0]
        executed_cost += float(cost.running(x, u0))
        x = np.asarray(dynamics.step(x, u0), dtype=float)
        executed_controls.append(u0)
        executed_states.append(x.copy())
        u = u.shifted()

    executed_cost += float(cost.terminal(x))
    executed = Trajectory(states=np.asarray(executed_states),
                          controls=np.asarray(executed_controls),
                          total_cost=executed_cost)
    return ControlLoopResult(plans=plans, executed=executed, diagnostics=diagnostics)
