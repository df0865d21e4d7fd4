"""Smoothed energy, its quadrature oracle, and the MPPI-equivalence checker.

The smoothed energy of E under a Gaussian kernel phi with temperature tau is

    smoothed(U) = tau * log( integral exp(E(y)/tau) phi(U - y) dy ),

whose exponential (over tau) is the kernel-smoothed Gibbs density up to the
partition constant. Gradient ascent on it with learning rate (1/tau) Sigma
reproduces the MPPI softmax update in expectation; check_mppi_equivalence
measures that agreement and its Monte Carlo convergence rate.

Quadrature is trapezoidal on uniform grids in one or two dimensions and all
integrals are accumulated in log space, so energies that scale with horizon
never overflow.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    ControlSequence,
    EnergyModel,
    FunctionEnergy,
    GibbsMeasure,
    NoiseKernel,
    OutOfSupportError,
    RunSeed,
    generator,
    logsumexp,
)

__all__ = [
    "QuadratureGrid",
    "SmoothedEnergy",
    "smoothed_energy",
    "smoothed_energy_batch",
    "smoothed_gradient",
    "gradient_ascent_step",
    "check_mppi_equivalence",
    "EquivalenceReport",
    "EquivalenceEntry",
    "jensen_bound_check",
    "gibbs_log_partition",
    "gibbs_density",
    "normalize_gibbs",
    "gibbs_free_energy",
    "constant_energy",
    "quadratic_energy",
    "double_well_energy",
    "fourier_energy",
    "test_energy_corpus",
]


@dataclass(frozen=True)
class QuadratureGrid:
    """Uniform tensor-product grid (d <= 2) with trapezoidal weights."""

    axes: tuple

    def __post_init__(self) -> None:
        axes = tuple(np.asarray(a, dtype=float) for a in self.axes)
        if not 1 <= len(axes) <= 2:
            raise ValueError("quadrature supports one or two dimensions only")
        for a in axes:
            if a.size < 16:
                raise ValueError("each axis needs at least 16 points")
            if not np.all(np.isfinite(a)):
                raise ValueError("grid bounds must be finite")
            spacing = np.diff(a)
            if not np.allclose(spacing, spacing[0], rtol=1e-9):
                raise ValueError("axes must be uniformly spaced")
        object.__setattr__(self, "axes", axes)

    @classmethod
    def uniform(cls, bounds, counts) -> "QuadratureGrid":
        """Grid from per-axis (lo, hi) bounds and point counts."""
        counts = np.atleast_1d(counts)
        if np.ndim(bounds[0]) == 0:
            bounds = [bounds]
        if len(counts) == 1 and len(bounds) > 1:
            counts = np.repeat(counts, len(bounds))
        axes = [np.linspace(lo, hi, int(n)) for (lo, hi), n in zip(bounds, counts)]
        return cls(tuple(axes))

    @classmethod
    def for_kernel(cls, query_bounds, kernel_std, pad_stds: float = 6.0,
                   points_per_std: float = 8.0, max_points: int = 200_000) -> "QuadratureGrid":
        """Grid covering the query region plus pad_stds kernel deviations per side,
        spaced finely enough to resolve the kernel."""
        if np.ndim(query_bounds[0]) == 0:
            query_bounds = [query_bounds]
        stds = np.broadcast_to(np.atleast_1d(kernel_std).astype(float), (len(query_bounds),))
        axes = []
        for (lo, hi), std in zip(query_bounds, stds):
            lo_pad, hi_pad = lo - pad_stds * std, hi + pad_stds * std
            spacing = std / points_per_std
            count = int(math.ceil((hi_pad - lo_pad) / spacing)) + 1
            count = max(count, 16)
            if count > max_points:
                raise ValueError(f"grid would need {count} points (max {max_points}); "
                                 "shrink the query region or coarsen points_per_std")
            axes.append(np.linspace(lo_pad, hi_pad, count))
        return cls(tuple(axes))

    @property
    def dim(self) -> int:
        return len(self.axes)

    @property
    def points(self) -> np.ndarray:
        """All grid nodes, shape (M, d)."""
        if self.dim == 1:
            return self.axes[0][:, None]
        xs, ys = np.meshgrid(self.axes[0], self.axes[1], indexing="ij")
        return np.stack([xs.ravel(), ys.ravel()], axis=-1)

    @property
    def log_weights(self) -> np.ndarray:
        """Log trapezoidal weights matching `points`, shape (M,)."""
        per_axis = []
        for a in self.axes:
            h = a[1] - a[0]
            w = np.full(a.size, h)
            w[0] = w[-1] = 0.5 * h
            per_axis.append(np.log(w))
        if self.dim == 1:
            return per_axis[0]
        return (per_axis[0][:, None] + per_axis[1][None, :]).ravel()

    def require_interior(self, u: np.ndarray, margin) -> None:
        """Raise unless u sits at least `margin` (per axis) inside the grid."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        margin = np.broadcast_to(np.atleast_1d(margin).astype(float), (self.dim,))
        for k, a in enumerate(self.axes):
            if u[k] < a[0] + margin[k] or u[k] > a[-1] - margin[k]:
                raise OutOfSupportError(
                    f"query {u.tolist()} is within {margin[k]:.6g} of the grid edge on axis {k}")


@dataclass(frozen=True)
class SmoothedEnergy:
    """E smoothed by a Gaussian kernel, evaluated by quadrature or Monte Carlo."""

    energy: EnergyModel
    kernel: NoiseKernel
    grid: QuadratureGrid | None = None
    mode: str = "quadrature"
    mc_samples: int = 0
    seed: RunSeed | None = None

    def __post_init__(self) -> None:
        if self.mode not in ("quadrature", "monte-carlo"):
            raise ValueError("mode must be 'quadrature' or 'monte-carlo'")
        if self.mode == "quadrature":
            if self.grid is None:
                raise ValueError("quadrature mode requires a grid")
            if self.grid.dim != self.kernel.dim:
                raise ValueError("grid dimension must match the kernel dimension")
        else:
            if self.mc_samples < 1 or self.seed is None:
                raise ValueError("monte-carlo mode requires mc_samples >= 1 and a seed")

    def kernel_std(self) -> np.ndarray:
        cov = self.kernel.covariance
        return np.sqrt(cov if cov.ndim == 1 else np.diag(cov))


def _energy_on_grid(energy, grid: QuadratureGrid) -> np.ndarray:
    if isinstance(energy, EnergyModel):
        return np.asarray(energy(grid.points), dtype=float)
    vals = np.asarray(energy, dtype=float)
    if vals.shape != (grid.points.shape[0],):
        raise ValueError("energy array must match the number of grid points")
    return vals


def _as_flat(u) -> np.ndarray:
    if isinstance(u, ControlSequence):
        return u.flat
    return np.atleast_1d(np.asarray(u, dtype=float))


def _quadrature_posterior(se: SmoothedEnergy, us: np.ndarray):
    """Log integrand over the grid for each query row of us, shape (B, M)."""
    grid = se.grid
    pts = grid.points
    e_vals = _energy_on_grid(se.energy, grid)
    offsets = us[:, None, :] - pts[None, :, :]
    log_phi = se.kernel.log_density(offsets)
    return e_vals[None, :] / se.kernel.tau + log_phi + grid.log_weights[None, :], pts


def smoothed_energy_batch(se: SmoothedEnergy, us: np.ndarray) -> np.ndarray:
    """Smoothed energy at several query points, shape (B, d) -> (B,)."""
    us = np.atleast_2d(np.asarray(us, dtype=float))
    tau = se.kernel.tau
    if se.mode == "quadrature":
        for u in us:
            se.grid.require_interior(u, 6.0 * se.kernel_std())
        log_integrand, _ = _quadrature_posterior(se, us)
        return tau * logsumexp(log_integrand, axis=1)
    out = np.empty(us.shape[0])
    for b, u in enumerate(us):
        out[b] = _mc_value_and_gradient(se, u)[0]
    return out


def smoothed_energy(se: SmoothedEnergy, u) -> float:
    """smoothed(U) = tau * log integral exp(E(y)/tau) phi(U - y) dy."""
    return float(smoothed_energy_batch(se, _as_flat(u)[None, :])[0])


def _mc_value_and_gradient(se: SmoothedEnergy, u: np.ndarray):
    rng = generator(se.seed)
    z = rng.standard_normal((se.mc_samples, se.kernel.dim))
    if se.kernel.is_diagonal:
        eps = z * np.sqrt(se.kernel.covariance)
    else:
        eps = z @ se.kernel.scale().T
    tau = se.kernel.tau
    e_vals = np.asarray(se.energy(u[None, :] + eps), dtype=float)
    scaled = e_vals / tau
    value = tau * (logsumexp(scaled) - np.log(se.mc_samples))
    w = np.exp(scaled - logsumexp(scaled))
    grad = tau * se.kernel.apply_inverse(w @ eps)
    return float(value), grad


def smoothed_gradient(se: SmoothedEnergy, u) -> np.ndarray:
    """Gradient of the smoothed energy via the kernel score identity.

    Differentiating under the integral gives
    grad = tau * Sigma^{-1} * E_posterior[y - U], with the posterior weights
    proportional to exp(E(y)/tau) phi(U - y). Central finite differences of
    smoothed_energy agree with this to quadrature accuracy.
    """
    u = _as_flat(u)
    if se.mode == "monte-carlo":
        return _mc_value_and_gradient(se, u)[1]
    se.grid.require_interior(u, 6.0 * se.kernel_std())
    log_integrand, pts = _quadrature_posterior(se, u[None, :])
    log_norm = logsumexp(log_integrand, axis=1)
    post = np.exp(log_integrand[0] - log_norm[0])
    mean_offset = post @ (pts - u[None, :])
    return se.kernel.tau * se.kernel.apply_inverse(mean_offset)


def gradient_ascent_step(se: SmoothedEnergy, u, kernel: NoiseKernel | None = None) -> np.ndarray:
    """One gradient-ascent step U' = U + (1/tau) Sigma grad smoothed(U)."""
    u = _as_flat(u)
    k = kernel if kernel is not None else se.kernel
    g = smoothed_gradient(se, u)
    return u + k.apply(g) / k.tau


# ---------------------------------------------------------------------------
# MPPI equivalence


@dataclass(frozen=True)
class EquivalenceEntry:
    n_samples: int
    mean_step: np.ndarray
    rms_error: float
    standard_error: np.ndarray


@dataclass(frozen=True)
class EquivalenceReport:
    """Sampled MPPI steps against the quadrature gradient-ascent step."""

    target_step: np.ndarray
    entries: list
    slope: float
    passed: bool

    def rms_errors(self) -> np.ndarray:
        return np.array([e.rms_error for e in self.entries])

    def sample_counts(self) -> np.ndarray:
        return np.array([e.n_samples for e in self.entries])


def _mppi_step_and_se(u: np.ndarray, energy: EnergyModel, kernel: NoiseKernel,
                      n_samples: int, seed: RunSeed):
    """One sampled softmax-weighted step plus its delta-method standard error."""
    from .mppi import MppiConfig, mppi_update

    cfg = MppiConfig(kernel=kernel, samples=n_samples, horizon=1)
    seq = ControlSequence.from_flat(u, dim=kernel.dim)
    updated, batch = mppi_update(seq, energy, cfg, seed)
    direction = batch.direction().ravel()
    eps = batch.perturbations.reshape(n_samples, -1)
    w = batch.weights
    se = np.sqrt(np.sum((w[:, None] * (eps - direction[None, :])) ** 2, axis=0))
    return updated.flat, se


def check_mppi_equivalence(energy: EnergyModel, kernel: NoiseKernel, u,
                           seed: RunSeed, sample_counts=(100, 1_000, 10_000, 100_000),
                           replicates: int = 16,
                           grid: QuadratureGrid | None = None) -> EquivalenceReport:
    """Compare sampled MPPI steps with the quadrature gradient-ascent step.

    For each batch size the sampled step is replicated on independent streams;
    the report records the RMS error against the quadrature target, the
    log-log decay slope across batch sizes (1/sqrt(N) gives -0.5), and a pass
    flag requiring the mean step at the largest N to sit within three standard
    errors of the target on every coordinate.
    """
    u = _as_flat(u)
    if grid is None:
        std = np.sqrt(kernel.covariance if kernel.is_diagonal else np.diag(kernel.covariance))
        bounds = [(float(ui), float(ui)) for ui in u]
        grid = QuadratureGrid.for_kernel(bounds, std, pad_stds=8.0, points_per_std=16.0)
    se_quad = SmoothedEnergy(energy=energy, kernel=kernel, grid=grid)
    target = gradient_ascent_step(se_quad, u)

    entries = []
    for ni, n in enumerate(sample_counts):
        steps = np.empty((replicates, u.size))
        se_sq = np.zeros(u.size)
        for r in range(replicates):
            steps[r], se_r = _mppi_step_and_se(u, energy, kernel, int(n), seed.derive(ni, r))
            se_sq += se_r**2
        rms = float(np.sqrt(np.mean(np.sum((steps - target[None, :]) ** 2, axis=1))))
        se_mean = np.sqrt(se_sq) / replicates
        entries.append(EquivalenceEntry(int(n), steps.mean(axis=0), rms, se_mean))

    if len(entries) >= 2:
        logs_n = np.log10([e.n_samples for e in entries])
        logs_err = np.log10(np.maximum([e.rms_error for e in entries], 1e-300))
        slope = float(np.polyfit(logs_n, logs_err, 1)[0])
    else:
        slope = float("nan")
    last = entries[-1]
    passed = bool(np.all(np.abs(last.mean_step - target) <= 3.0 * last.standard_error))
    return EquivalenceReport(target_step=target, entries=entries, slope=slope, passed=passed)


# ---------------------------------------------------------------------------
# Jensen bound


def jensen_bound_check(se: SmoothedEnergy, u, tolerance: float = 1e-6) -> tuple[float, float]:
    """Assert smoothed(U) >= integral E(y) phi(U - y) dy, return (smoothed, bound).

    The bound is the local Gaussian average of E; Jensen's inequality on the
    concave logarithm makes the smoothed energy at least that average.
    """
    if se.mode != "quadrature":
        raise ValueError("jensen_bound_check requires quadrature mode")
    u = _as_flat(u)
    se.grid.require_interior(u, 6.0 * se.kernel_std())
    pts = se.grid.points
    e_vals = _energy_on_grid(se.energy, se.grid)
    log_phi_w = se.kernel.log_density(u[None, :] - pts) + se.grid.log_weights
    lower = float(np.exp(log_phi_w) @ e_vals)
    value = smoothed_energy(se, u)
    if value < lower - tolerance:
        raise AssertionError(
            f"Jensen bound violated: smoothed {value:.9g} < average {lower:.9g} - {tolerance:g}")
    return value, lower


# ---------------------------------------------------------------------------
# Gibbs free energy on a grid


def gibbs_log_partition(grid: QuadratureGrid, energy, tau: float) -> float:
    """log Z = log integral exp(E/tau) by trapezoidal quadrature."""
    if tau <= 0:
        raise ValueError("temperature tau must be positive")
    e_vals = _energy_on_grid(energy, grid)
    return float(logsumexp(e_vals / tau + grid.log_weights))


def gibbs_density(grid: QuadratureGrid, energy, tau: float) -> np.ndarray:
    """Gibbs density exp(E/tau)/Z evaluated on the grid nodes."""
    e_vals = _energy_on_grid(energy, grid)
    return np.exp(e_vals / tau - gibbs_log_partition(grid, energy, tau))


def normalize_gibbs(measure: GibbsMeasure, grid: QuadratureGrid) -> GibbsMeasure:
    """Fill in the measure's log partition by quadrature on the grid."""
    return measure.with_log_partition(gibbs_log_partition(grid, measure.energy, measure.tau))


def gibbs_free_energy(grid: QuadratureGrid, q: np.ndarray, energy, tau: float) -> float:
    """G_q = E_q[E] + tau * S_q for a density q given by values on the grid.

    q must be non-negative and integrate to 1 within 1e-8 under the grid's
    trapezoidal weights. The Gibbs density maximizes G at the value
    tau * log Z; every other normalized q scores strictly lower.
    """
    if tau <= 0:
        raise ValueError("temperature tau must be positive")
    q = np.asarray(q, dtype=float)
    w = np.exp(grid.log_weights)
    if q.shape != w.shape:
        raise ValueError("q must assign one density value per grid point")
    if np.any(q < 0):
        raise ValueError("q must be non-negative")
    mass = float(w @ q)
    if abs(mass - 1.0) > 1e-8:
        raise ValueError(f"q must integrate to 1 (got {mass:.12g})")
    e_vals = _energy_on_grid(energy, grid)
    with np.errstate(divide="ignore", invalid="ignore"):
        qlogq = np.where(q > 0, q * np.log(q), 0.0)
    mean_energy = float(w @ (q * e_vals))
    entropy = -float(w @ qlogq)
    return mean_energy + tau * entropy


# ---------------------------------------------------------------------------
# Test-energy corpus: the oracle functions used by the verification suite.


def constant_energy(value: float = 0.0, dim: int = 1) -> FunctionEnergy:
    return FunctionEnergy(lambda u: np.full(np.asarray(u).shape[:-1], float(value)),
                          dim=dim, vectorized=True)


def quadratic_energy(scale: float = 1.0, dim: int = 1) -> FunctionEnergy:
    """E(u) = -scale * ||u||^2 / 2."""
    return FunctionEnergy(lambda u: -0.5 * scale * np.sum(np.asarray(u) ** 2, axis=-1),
                          dim=dim, vectorized=True)


def double_well_energy(depth: float = 1.0, tilt: float = 0.3) -> FunctionEnergy:
    """Asymmetric 1D double well: E(u) = -depth*(u^2-1)^2 + tilt*u."""

    def fn(u):
        x = np.asarray(u)[..., 0]
        return -depth * (x**2 - 1.0) ** 2 + tilt * x

    return FunctionEnergy(fn, dim=1, vectorized=True)


def fourier_energy(seed: RunSeed, n_features: int = 8, max_freq: float = 2.5,
                   amplitude: float = 1.0, dim: int = 1) -> FunctionEnergy:
    """Random smooth energy from a finite Fourier-feature expansion.

    E(u) = sum_k a_k cos(w_k . u + b_k) with frequencies capped at max_freq,
    so all derivatives are bounded by sums of |a_k| |w_k|^r.
    """
    rng = generator(seed)
    freqs = rng.uniform(0.3, max_freq, size=(n_features, dim))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_features)
    amps = amplitude * rng.standard_normal(n_features) / np.sqrt(n_features)

    def fn(u):
        u = np.asarray(u, dtype=float)
        return np.cos(u @ freqs.T + phases) @ amps

    return FunctionEnergy(fn, dim=dim, vectorized=True)


def test_energy_corpus(seed: RunSeed, n_random: int = 4) -> list[tuple[str, FunctionEnergy]]:
    """Constant, quadratic, double-well, and a few random Fourier energies."""
    corpus = [
        ("constant", constant_energy(0.7)),
        ("quadratic", quadratic_energy(1.0)),
        ("double_well", double_well_energy()),
    ]
    for k in range(n_random):
        corpus.append((f"fourier_{k}", fourier_energy(seed.derive(k))))
    return corpus
