"""Shared domain types, seeded randomness, and stable weighted-averaging primitives.

Everything downstream (MPPI, policy gradients, diffusion samplers, the planner)
is built on the pieces here: control sequences, Gaussian perturbation kernels,
softmax weighting routed through log-sum-exp, and counter-based random streams
that make every batch reproducible regardless of execution order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

__all__ = [
    "DegenerateBatchError",
    "OutOfSupportError",
    "RunSeed",
    "generator",
    "log_sum_exp",
    "logsumexp",
    "softmax_weights",
    "effective_sample_size",
    "EnergyModel",
    "FunctionEnergy",
    "ControlSequence",
    "NoiseKernel",
    "PerturbationBatch",
    "GibbsMeasure",
    "sample_perturbations",
    "worker_count",
]


class DegenerateBatchError(RuntimeError):
    """Every sampled rollout returned -inf energy, so no weights can be formed."""


class OutOfSupportError(ValueError):
    """Query point too close to the edge of a quadrature grid to trust the integral."""


# ---------------------------------------------------------------------------
# Seeded randomness


@dataclass(frozen=True)
class RunSeed:
    """Root of a reproducible random stream.

    The same (seed, stream) pair always yields the same draws. Batches are laid
    out sample-contiguously from a counter-based generator, so requesting more
    samples never changes earlier ones and parallel consumers cannot perturb
    the sequence.
    """

    seed: int
    stream: int = 0

    def __post_init__(self) -> None:
        if not (0 <= int(self.seed) < 2**64):
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if int(self.stream) < 0:
            raise ValueError("stream id must be non-negative")

    def derive(self, *indices: int) -> "RunSeed":
        """Child seed with a distinct stream id mixed from the given indices."""
        mask = (1 << 64) - 1
        h = int(self.stream)
        for idx in indices:
            h = ((h ^ ((int(idx) + 1) & mask)) * 0x9E3779B97F4A7C15) & mask
            h = ((h ^ (h >> 31)) * 0xBF58476D1CE4E5B9) & mask
            h ^= h >> 27
        return RunSeed(self.seed, h)


def generator(seed: RunSeed) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by (seed, stream)."""
    return np.random.Generator(np.random.Philox(key=[int(seed.seed), int(seed.stream)]))


def worker_count() -> int:
    """Worker-parallelism cap, read from GIBBS_CONTROL_THREADS (default 1)."""
    raw = os.environ.get("GIBBS_CONTROL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# Stable aggregation primitives


def log_sum_exp(values) -> float:
    """log(sum(exp(v_k))) computed with a max shift so huge magnitudes never overflow."""
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        raise ValueError("log_sum_exp requires a non-empty collection")
    if not np.all(np.isfinite(v)):
        raise ValueError("log_sum_exp requires finite values")
    m = float(v.max())
    return m + float(np.log(np.sum(np.exp(v - m))))


def logsumexp(a: np.ndarray, axis: int | None = None) -> np.ndarray:
    """Array log-sum-exp that tolerates -inf entries (empty mass, not an error)."""
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis))
    return out + np.squeeze(m, axis=axis if axis is not None else None)


def softmax_weights(energies, tau: float) -> np.ndarray:
    """Normalized weights proportional to exp(energy / tau).

    Shift-invariant in the energies and scale-covariant in (energies, tau).
    Entries of -inf receive zero weight; all--inf batches are rejected.
    """
    if tau <= 0:
        raise ValueError("temperature tau must be positive")
    e = np.asarray(energies, dtype=float)
    if e.size == 0:
        raise ValueError("softmax_weights requires a non-empty batch")
    if np.any(np.isnan(e)) or np.any(e == np.inf):
        raise ValueError("energies must not contain NaN or +inf")
    if np.all(e == -np.inf):
        raise ValueError("softmax_weights is undefined when every energy is -inf")
    scaled = e / tau
    m = scaled.max()
    w = np.exp(scaled - m)
    w /= w.sum()
    return w


def effective_sample_size(weights) -> float:
    """1 / sum(w^2), the usual degeneracy diagnostic for softmax weights."""
    w = np.asarray(weights, dtype=float)
    return float(1.0 / np.sum(w**2))


# ---------------------------------------------------------------------------
# Energy models


class EnergyModel:
    """Scalar energy over flattened decision vectors; larger is better.

    The convention throughout is E(U) = -cost(U) = reward(U) = log of an
    unnormalized density, so every method in this package maximizes E.
    """

    dim: int | None = None

    def evaluate(self, u: np.ndarray) -> float:
        raise NotImplementedError

    def evaluate_batch(self, us: np.ndarray) -> np.ndarray:
        us = np.asarray(us, dtype=float)
        return np.array([self.evaluate(row) for row in us])

    def __call__(self, u: np.ndarray):
        u = np.asarray(u, dtype=float)
        if u.ndim <= 1:
            return self.evaluate(u)
        return self.evaluate_batch(u.reshape(-1, u.shape[-1])).reshape(u.shape[:-1])


class FunctionEnergy(EnergyModel):
    """Energy defined by a plain function of the flattened vector."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray], dim: int | None = None,
                 vectorized: bool = False):
        self.fn = fn
        self.dim = dim
        self.vectorized = vectorized

    def evaluate(self, u: np.ndarray) -> float:
        return float(self.fn(np.asarray(u, dtype=float)))

    def evaluate_batch(self, us: np.ndarray) -> np.ndarray:
        us = np.asarray(us, dtype=float)
        if self.vectorized:
            return np.asarray(self.fn(us), dtype=float)
        return np.array([float(self.fn(row)) for row in us])


# ---------------------------------------------------------------------------
# Domain types


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class ControlSequence:
    """A horizon of per-step control vectors, shape (T, m)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.atleast_2d(np.asarray(self.values, dtype=float))
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError("controls must have shape (T, m) with T, m >= 1")
        if not np.all(np.isfinite(v)):
            raise ValueError("controls must be finite")
        object.__setattr__(self, "values", _readonly(v))

    @classmethod
    def zeros(cls, horizon: int, dim: int = 1) -> "ControlSequence":
        return cls(np.zeros((horizon, dim)))

    @classmethod
    def from_flat(cls, flat, dim: int = 1) -> "ControlSequence":
        flat = np.asarray(flat, dtype=float).ravel()
        return cls(flat.reshape(-1, dim))

    @property
    def horizon(self) -> int:
        return self.values.shape[0]

    @property
    def dim(self) -> int:
        return self.values.shape[1]

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def shifted(self) -> "ControlSequence":
        """Receding-horizon shift: drop the first step, append a zero tail."""
        return ControlSequence(np.vstack([self.values[1:], np.zeros((1, self.dim))]))


@dataclass(frozen=True)
class NoiseKernel:
    """Gaussian smoothing/sampling kernel with per-step covariance and a temperature.

    covariance is either a (m,) vector of diagonal entries or a full (m, m)
    symmetric positive-definite matrix. Full matrices are intended for the
    low-dimensional quadrature paths; sampling and MPPI use the diagonal form.
    """

    covariance: np.ndarray
    tau: float = 1.0

    def __post_init__(self) -> None:
        cov = np.asarray(self.covariance, dtype=float)
        if cov.ndim == 0:
            cov = cov.reshape(1)
        if self.tau <= 0 or not np.isfinite(self.tau):
            raise ValueError("temperature tau must be positive and finite")
        if cov.ndim == 1:
            if cov.size < 1 or np.any(cov <= 0) or not np.all(np.isfinite(cov)):
                raise ValueError("diagonal covariance entries must be positive and finite")
        elif cov.ndim == 2:
            if cov.shape[0] != cov.shape[1]:
                raise ValueError("full covariance must be square")
            if not np.allclose(cov, cov.T, atol=1e-12):
                raise ValueError("full covariance must be symmetric")
            try:
                np.linalg.cholesky(cov)
            except np.linalg.LinAlgError as exc:
                raise ValueError("full covariance must be positive-definite") from exc
        else:
            raise ValueError("covariance must be a vector of diagonal entries or a matrix")
        object.__setattr__(self, "covariance", _readonly(cov))

    @property
    def dim(self) -> int:
        return self.covariance.shape[0]

    @property
    def is_diagonal(self) -> bool:
        return self.covariance.ndim == 1

    def scale(self) -> np.ndarray:
        """Matrix square root used to color standard normal draws."""
        if self.is_diagonal:
            return np.sqrt(self.covariance)
        return np.linalg.cholesky(self.covariance)

    def apply_inverse(self, v: np.ndarray) -> np.ndarray:
        """Sigma^{-1} v along the last axis."""
        v = np.asarray(v, dtype=float)
        if self.is_diagonal:
            return v / self.covariance
        return np.linalg.solve(self.covariance, v[..., None])[..., 0]

    def apply(self, v: np.ndarray) -> np.ndarray:
        """Sigma v along the last axis."""
        v = np.asarray(v, dtype=float)
        if self.is_diagonal:
            return v * self.covariance
        return v @ self.covariance.T

    def log_det(self) -> float:
        if self.is_diagonal:
            return float(np.sum(np.log(self.covariance)))
        return float(2.0 * np.sum(np.log(np.diag(np.linalg.cholesky(self.covariance)))))

    def flat_covariance(self, horizon: int) -> np.ndarray:
        """Covariance of a whole flattened sequence: the per-step kernel repeated
        block-diagonally. Diagonal kernels return the (T*m,) diagonal."""
        if self.is_diagonal:
            return np.tile(self.covariance, horizon)
        if horizon == 1:
            return np.array(self.covariance)
        d = self.dim * horizon
        full = np.zeros((d, d))
        for t in range(horizon):
            s = slice(t * self.dim, (t + 1) * self.dim)
            full[s, s] = self.covariance
        return full

    def log_density(self, offsets: np.ndarray) -> np.ndarray:
        """Zero-mean Gaussian log-density of per-step offsets, shape (..., m)."""
        offsets = np.asarray(offsets, dtype=float)
        quad = np.sum(offsets * self.apply_inverse(offsets), axis=-1)
        return -0.5 * (self.dim * np.log(2.0 * np.pi) + self.log_det() + quad)

    def sequence_log_density(self, eps: np.ndarray) -> np.ndarray:
        """Log-density of a perturbation sequence, shape (..., T, m), steps independent."""
        return np.sum(self.log_density(eps), axis=-1)


@dataclass(frozen=True)
class PerturbationBatch:
    """N sampled perturbation sequences with (optionally) their energies and weights."""

    perturbations: np.ndarray
    energies: np.ndarray | None = None
    weights: np.ndarray | None = None

    def __post_init__(self) -> None:
        eps = np.asarray(self.perturbations, dtype=float)
        if eps.ndim != 3 or eps.shape[0] < 1:
            raise ValueError("perturbations must have shape (N, T, m)")
        object.__setattr__(self, "perturbations", _readonly(eps))
        if self.energies is not None:
            e = np.asarray(self.energies, dtype=float)
            if e.shape != (eps.shape[0],):
                raise ValueError("energies must have shape (N,)")
            object.__setattr__(self, "energies", _readonly(e))
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (eps.shape[0],):
                raise ValueError("weights must have shape (N,)")
            if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-12:
                raise ValueError("weights must be non-negative and sum to 1 within 1e-12")
            object.__setattr__(self, "weights", _readonly(w))

    @property
    def n_samples(self) -> int:
        return self.perturbations.shape[0]

    @property
    def horizon(self) -> int:
        return self.perturbations.shape[1]

    @property
    def dim(self) -> int:
        return self.perturbations.shape[2]

    def with_energies(self, energies, tau: float) -> "PerturbationBatch":
        """Attach rollout energies and the softmax weights they induce."""
        e = np.asarray(energies, dtype=float)
        if np.all(e == -np.inf):
            raise DegenerateBatchError("all sampled energies are -inf; no valid rollout")
        return replace(self, energies=e, weights=softmax_weights(e, tau))

    def with_exponents(self, exponents) -> "PerturbationBatch":
        """Attach pre-assembled softmax exponents (regularized weighting)."""
        ex = np.asarray(exponents, dtype=float)
        if np.all(ex == -np.inf):
            raise DegenerateBatchError("all softmax exponents are -inf; no valid rollout")
        return replace(self, weights=softmax_weights(ex, 1.0))

    def direction(self) -> np.ndarray:
        """Softmax-weighted average of the perturbations, shape (T, m)."""
        if self.weights is None:
            raise ValueError("batch has no weights; attach energies first")
        return np.einsum("n,ntm->tm", self.weights, self.perturbations)


@dataclass(frozen=True)
class GibbsMeasure:
    """Density proportional to exp(E(U) / tau); the optimal control distribution."""

    energy: EnergyModel
    tau: float = 1.0
    log_partition: float | None = None

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("temperature tau must be positive")

    def unnormalized_log_density(self, u: np.ndarray) -> np.ndarray:
        return np.asarray(self.energy(u), dtype=float) / self.tau

    def log_density(self, u: np.ndarray) -> np.ndarray:
        if self.log_partition is None:
            raise ValueError("log_partition not set; normalize on a quadrature grid first")
        return self.unnormalized_log_density(u) - self.log_partition

    def with_log_partition(self, log_z: float) -> "GibbsMeasure":
        return replace(self, log_partition=float(log_z))


def sample_perturbations(kernel: NoiseKernel, horizon: int, n_samples: int,
                         seed: RunSeed) -> PerturbationBatch:
    """Draw N zero-mean Gaussian perturbation sequences of shape (T, m).

    Draws come from a counter-based stream in sample-major order, so sample i
    is identical whether the batch holds i+1 or a million sequences, and two
    calls with the same seed return bit-identical batches.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    rng = generator(seed)
    z = rng.standard_normal((n_samples, horizon, kernel.dim))
    if kernel.is_diagonal:
        eps = z * np.sqrt(kernel.covariance)
    else:
        eps = z @ kernel.scale().T
    return PerturbationBatch(eps)
