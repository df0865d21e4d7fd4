"""Gaussian open-loop policy gradients and their per-batch reduction to MPPI.

The policy is a sequence of per-step Gaussian means with a shared,
parameter-independent covariance. The vanilla score-function estimator is

    grad_t ~= Sigma^{-1} (1/N) sum_i eps_{t,i} R(U + E_i),

and replacing the return R by exp(R/tau) turns the estimator into the MPPI
numerator: on the identical batch, the MPPI direction equals
Sigma * (exp-estimate) * N / sum_i exp(R_i/tau) exactly. check_pg_mppi_identity
verifies that identity and its negative control.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    EnergyModel,
    NoiseKernel,
    PerturbationBatch,
    RunSeed,
    sample_perturbations,
)

__all__ = [
    "GaussianOpenLoopPolicy",
    "log_policy_density",
    "PolicyGradientEstimate",
    "ExpPolicyGradientEstimate",
    "pg_estimate",
    "pg_exp_estimate",
    "check_pg_mppi_identity",
    "PgMppiIdentityReport",
]


@dataclass(frozen=True)
class GaussianOpenLoopPolicy:
    """Per-step Gaussian action distribution with means (T, m) and shared kernel."""

    means: np.ndarray
    kernel: NoiseKernel

    def __post_init__(self) -> None:
        means = np.atleast_2d(np.asarray(self.means, dtype=float))
        if means.ndim != 2 or means.shape[1] != self.kernel.dim:
            raise ValueError("means must have shape (T, m) matching the kernel dimension")
        object.__setattr__(self, "means", means)

    @property
    def horizon(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.kernel.dim


def log_policy_density(policy: GaussianOpenLoopPolicy, action: np.ndarray, t: int) -> float:
    """Gaussian log-density of an action at step t:
    -D/2 log(2 pi) - 1/2 log|Sigma| - 1/2 (a - mu_t)^T Sigma^{-1} (a - mu_t)."""
    a = np.asarray(action, dtype=float)
    if a.shape != (policy.dim,):
        raise ValueError(f"action must have shape ({policy.dim},)")
    if not 0 <= t < policy.horizon:
        raise ValueError("step index out of range")
    diff = a - policy.means[t]
    quad = float(diff @ policy.kernel.apply_inverse(diff))
    d = policy.dim
    return -0.5 * (d * np.log(2.0 * np.pi) + policy.kernel.log_det() + quad)


def _sample_returns(policy: GaussianOpenLoopPolicy, energy: EnergyModel,
                    n_samples: int, seed: RunSeed) -> PerturbationBatch:
    batch = sample_perturbations(policy.kernel, policy.horizon, n_samples, seed)
    candidates = policy.means[None, ...] + batch.perturbations
    returns = np.asarray(energy.evaluate_batch(candidates.reshape(n_samples, -1)), dtype=float)
    return PerturbationBatch(batch.perturbations, energies=returns)


@dataclass(frozen=True)
class PolicyGradientEstimate:
    """Score-function gradient estimate with its per-coordinate standard error."""

    gradient: np.ndarray
    standard_error: np.ndarray
    n_samples: int
    batch: PerturbationBatch


def pg_estimate(policy: GaussianOpenLoopPolicy, energy: EnergyModel,
                n_samples: int, seed: RunSeed) -> PolicyGradientEstimate:
    """Vanilla estimator of the gradient of E[R] with respect to the means."""
    if n_samples < 1:
        raise ValueError("need at least one sample")
    batch = _sample_returns(policy, energy, n_samples, seed)
    terms = policy.kernel.apply_inverse(batch.perturbations) * batch.energies[:, None, None]
    grad = terms.mean(axis=0)
    if n_samples > 1:
        se = terms.std(axis=0, ddof=1) / np.sqrt(n_samples)
    else:
        se = np.full_like(grad, np.inf)
    return PolicyGradientEstimate(gradient=grad, standard_error=se,
                                  n_samples=n_samples, batch=batch)


@dataclass(frozen=True)
class ExpPolicyGradientEstimate:
    """Exponential-objective gradient estimate, kept in factored form.

    The true estimate of grad E[exp(R/tau)] is scaled_gradient * exp(log_scale);
    the shared factor exp(max R/tau) is reported separately so long horizons
    cannot overflow. scaled_weight_sum is sum_i exp((R_i - max R)/tau), the
    matching factored softmax denominator.
    """

    scaled_gradient: np.ndarray
    log_scale: float
    scaled_weight_sum: float
    tau: float
    n_samples: int
    batch: PerturbationBatch

    @property
    def gradient(self) -> np.ndarray:
        return self.scaled_gradient * np.exp(self.log_scale)


def pg_exp_estimate(policy: GaussianOpenLoopPolicy, energy: EnergyModel | None = None,
                    n_samples: int = 0, seed: RunSeed | None = None,
                    tau: float | None = None,
                    batch: PerturbationBatch | None = None) -> ExpPolicyGradientEstimate:
    """Estimator of grad E[exp(R/tau)]: Sigma^{-1} (1/N) sum_i eps_i exp(R_i/tau).

    The max return is factored out before exponentiation. Passing a
    pre-scored batch reuses its perturbations and returns (the identity
    check depends on both estimators seeing the identical batch).
    """
    if tau is None:
        tau = policy.kernel.tau
    if tau <= 0:
        raise ValueError("temperature tau must be positive")
    if batch is None:
        if n_samples < 1 or energy is None or seed is None:
            raise ValueError("need an energy model, a seed, and at least one sample")
        batch = _sample_returns(policy, energy, n_samples, seed)
    if batch.energies is None:
        raise ValueError("batch must carry returns")
    n = batch.n_samples
    shift = float(np.max(batch.energies)) / tau
    scaled = np.exp(batch.energies / tau - shift)
    mean_term = (batch.perturbations * scaled[:, None, None]).mean(axis=0)
    grad = policy.kernel.apply_inverse(mean_term)
    return ExpPolicyGradientEstimate(scaled_gradient=grad, log_scale=shift,
                                     scaled_weight_sum=float(scaled.sum()),
                                     tau=tau, n_samples=n, batch=batch)


@dataclass(frozen=True)
class PgMppiIdentityReport:
    """Residuals of the exp-PG/MPPI identity and its vanilla negative control."""

    mppi_direction: np.ndarray
    exp_pg_direction: np.ndarray
    residual: float
    control_residual: float
    passed: bool


def check_pg_mppi_identity(policy: GaussianOpenLoopPolicy, energy: EnergyModel | None,
                           batch: PerturbationBatch, tau: float | None = None,
                           tolerance: float = 1e-10) -> PgMppiIdentityReport:
    """Verify MPPI direction == Sigma * (exp-PG estimate) * N / sum_i exp(R_i/tau).

    Both sides are computed from the same batch, so the identity is algebraic:
    the two estimators differ only by the softmax normalizer. The negative
    control swaps exp(R/tau) for R itself (the vanilla weighting) and must
    break the identity whenever returns differ across the batch.
    """
    if batch.n_samples < 1:
        raise ValueError("batch must contain at least one sample")
    if batch.energies is None:
        if energy is None:
            raise ValueError("batch has no returns and no energy model was given")
        candidates = policy.means[None, ...] + batch.perturbations
        returns = np.asarray(energy.evaluate_batch(candidates.reshape(batch.n_samples, -1)),
                             dtype=float)
        batch = PerturbationBatch(batch.perturbations, energies=returns)
    if tau is None:
        tau = policy.kernel.tau

    mppi_dir = batch.with_energies(batch.energies, tau).direction()
    est = pg_exp_estimate(policy, tau=tau, batch=batch)
    exp_dir = policy.kernel.apply(est.scaled_gradient) * batch.n_samples / est.scaled_weight_sum

    scale = max(float(np.max(np.abs(mppi_dir))), 1e-300)
    residual = float(np.max(np.abs(exp_dir - mppi_dir))) / scale

    # Negative control: vanilla weighting R_i in place of exp(R_i/tau).
    returns = batch.energies
    vanilla_term = (batch.perturbations * returns[:, None, None]).mean(axis=0)
    denom = float(returns.sum())
    if denom == 0.0:
        control_residual = np.inf
    else:
        vanilla_dir = vanilla_term * batch.n_samples / denom
        control_residual = float(np.max(np.abs(vanilla_dir - mppi_dir))) / scale

    passed = residual <= tolerance
    return PgMppiIdentityReport(mppi_direction=mppi_dir, exp_pg_direction=exp_dir,
                                residual=residual, control_residual=control_residual,
                                passed=passed)
