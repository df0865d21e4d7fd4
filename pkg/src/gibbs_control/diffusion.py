"""VE/VP noise schedules, analytic mixture scores, and discretized reverse samplers.

The data distribution is a kernel-density mixture over a finite set of points,
so the marginal at every noise level is itself a Gaussian mixture and its
score is available in closed form. That lets each sampler update and the
denoising score-matching objective be exercised exactly, with no trained
network in the loop.

Both sampler families are implemented verbatim:

  VE ancestral:          x <- x + (s2_j - s2_{j-1}) score + sqrt(s2_{j-1}(s2_j - s2_{j-1})/s2_j) z
  VE reverse-diffusion:  x <- x + (s2_j - s2_{j-1}) score + sqrt(s2_j - s2_{j-1}) z
  VP ancestral:          x <- (x + b_j score)/sqrt(1 - b_j) + sqrt(b_j) z
  VP reverse-diffusion:  x <- (2 - sqrt(1 - b_j)) x + b_j score + sqrt(b_j) z

with s2 the squared VE noise levels (s2_0 = 0) and b the VP betas.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import FunctionEnergy, NoiseKernel, RunSeed, generator, logsumexp

__all__ = [
    "NoiseSchedule",
    "KdeDataModel",
    "ScoreFunction",
    "perturbation_kernel_params",
    "marginal_mixture_params",
    "log_marginal",
    "kde_log_density",
    "analytic_score",
    "forward_marginal_moments",
    "dsm_loss",
    "reverse_step_params",
    "reverse_sample",
    "smoothed_score_identity_check",
    "ScoreIdentityReport",
]

SAMPLERS = ("ancestral", "reverse-diffusion")


@dataclass(frozen=True)
class NoiseSchedule:
    """Forward-noise schedule: VE sigma levels or VP betas with their alpha-bars."""

    kind: str
    sigmas: np.ndarray | None = None
    betas: np.ndarray | None = None
    alpha_bars: np.ndarray | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("ve", "vp"):
            raise ValueError("schedule kind must be 've' or 'vp'")
        if self.kind == "ve":
            s = np.asarray(self.sigmas, dtype=float)
            if s.ndim != 1 or s.size < 1 or np.any(s <= 0) or np.any(np.diff(s) <= 0):
                raise ValueError("VE sigmas must be a strictly increasing positive sequence")
            object.__setattr__(self, "sigmas", s)
        else:
            b = np.asarray(self.betas, dtype=float)
            if b.ndim != 1 or b.size < 1 or np.any(b <= 0) or np.any(b >= 1):
                raise ValueError("VP betas must lie strictly inside (0, 1)")
            object.__setattr__(self, "betas", b)
            object.__setattr__(self, "alpha_bars", np.cumprod(1.0 - b))

    @classmethod
    def ve_geometric(cls, sigma_min: float = 0.01, sigma_max: float = 10.0,
                     n_steps: int = 1000) -> "NoiseSchedule":
        return cls("ve", sigmas=np.geomspace(sigma_min, sigma_max, n_steps))

    @classmethod
    def vp_linear(cls, beta_min: float = 1e-4, beta_max: float = 0.02,
                  n_steps: int = 1000) -> "NoiseSchedule":
        return cls("vp", betas=np.linspace(beta_min, beta_max, n_steps))

    @property
    def n_steps(self) -> int:
        seq = self.sigmas if self.kind == "ve" else self.betas
        return int(seq.size)

    def check_step(self, i: int) -> None:
        if not 1 <= i <= self.n_steps:
            raise ValueError(f"step index {i} outside 1..{self.n_steps}")


@dataclass(frozen=True)
class KdeDataModel:
    """Kernel-density data distribution: equal-weight Gaussians at the data points."""

    points: np.ndarray
    bandwidth: float = 0.0

    def __post_init__(self) -> None:
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise ValueError("need at least one data point, shaped (K, d)")
        if not np.all(np.isfinite(pts)) or not np.isfinite(self.bandwidth) or self.bandwidth < 0:
            raise ValueError("data points must be finite and bandwidth non-negative")
        object.__setattr__(self, "points", pts)

    @property
    def n_points(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]


def perturbation_kernel_params(schedule: NoiseSchedule, i: int,
                               x0: np.ndarray) -> tuple[np.ndarray, float]:
    """Mean and isotropic variance of the forward kernel at step i (1-based).

    VE: N(x0, sigma_i^2 I). VP: N(sqrt(abar_i) x0, (1 - abar_i) I) with
    abar_i the running product of (1 - beta_j).
    """
    schedule.check_step(i)
    x0 = np.asarray(x0, dtype=float)
    if schedule.kind == "ve":
        return x0, float(schedule.sigmas[i - 1] ** 2)
    abar = float(schedule.alpha_bars[i - 1])
    return np.sqrt(abar) * x0, 1.0 - abar


def marginal_mixture_params(data: KdeDataModel, schedule: NoiseSchedule,
                            i: int) -> tuple[np.ndarray, float]:
    """Component means and shared isotropic variance of the step-i marginal.

    The data bandwidth folds into the components exactly: VE variance is
    sigma_i^2 + h^2, VP variance is (1 - abar_i) + abar_i h^2 (the forward
    scaling sqrt(abar) multiplies data draws, hence their spread too).
    """
    schedule.check_step(i)
    h2 = data.bandwidth**2
    if schedule.kind == "ve":
        return data.points, float(schedule.sigmas[i - 1] ** 2 + h2)
    abar = float(schedule.alpha_bars[i - 1])
    return np.sqrt(abar) * data.points, (1.0 - abar) + abar * h2


def _component_log_densities(x: np.ndarray, means: np.ndarray, var: float) -> np.ndarray:
    """Log N(x; mean_k, var I) for each batch row and component, shape (B, K)."""
    d = means.shape[1]
    sq = np.sum((x[:, None, :] - means[None, :, :]) ** 2, axis=-1)
    return -0.5 * (sq / var + d * np.log(2.0 * np.pi * var))


def log_marginal(data: KdeDataModel, schedule: NoiseSchedule, i: int,
                 x: np.ndarray) -> np.ndarray:
    """Log-density of the step-i marginal mixture at x, shape (..., d) -> (...,)."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    means, var = marginal_mixture_params(data, schedule, i)
    logs = logsumexp(_component_log_densities(xb, means, var), axis=1) - np.log(data.n_points)
    return float(logs[0]) if single else logs


def kde_log_density(data: KdeDataModel, x: np.ndarray) -> np.ndarray:
    """Log-density of the unperturbed KDE itself (bandwidth must be positive)."""
    if data.bandwidth <= 0:
        raise ValueError("kde_log_density requires a positive bandwidth")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    logs = logsumexp(_component_log_densities(xb, data.points, data.bandwidth**2), axis=1)
    logs = logs - np.log(data.n_points)
    return float(logs[0]) if single else logs


def analytic_score(data: KdeDataModel, schedule: NoiseSchedule, i: int,
                   x: np.ndarray) -> np.ndarray:
    """Exact score of the step-i marginal: responsibility-weighted pull to the means.

    score(x) = sum_k r_k(x) (mean_k - x) / var with r the posterior component
    responsibilities, computed in log space.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    means, var = marginal_mixture_params(data, schedule, i)
    logd = _component_log_densities(xb, means, var)
    resp = np.exp(logd - logsumexp(logd, axis=1)[:, None])
    score = (resp @ means - xb) / var
    return score[0] if single else score


def forward_marginal_moments(data: KdeDataModel, schedule: NoiseSchedule,
                             i: int) -> tuple[np.ndarray, np.ndarray]:
    """Exact per-dimension mean and second moment of the step-i marginal."""
    means, var = marginal_mixture_params(data, schedule, i)
    mean = means.mean(axis=0)
    second = (means**2).mean(axis=0) + var
    return mean, second


@dataclass(frozen=True)
class ScoreFunction:
    """Callable (x, step) -> score, tagged with its dimension and schedule kind."""

    evaluator: Callable[[np.ndarray, int], np.ndarray]
    dim: int
    kind: str | None = None

    def __call__(self, x: np.ndarray, i: int) -> np.ndarray:
        out = np.asarray(self.evaluator(np.asarray(x, dtype=float), i), dtype=float)
        if out.shape != np.shape(x):
            raise ValueError("score output must match the query shape")
        return out

    @classmethod
    def from_kde(cls, data: KdeDataModel, schedule: NoiseSchedule) -> "ScoreFunction":
        return cls(evaluator=lambda x, i: analytic_score(data, schedule, i, x),
                   dim=data.dim, kind=schedule.kind)

    @classmethod
    def zero(cls, dim: int, kind: str | None = None) -> "ScoreFunction":
        return cls(evaluator=lambda x, i: np.zeros_like(x), dim=dim, kind=kind)


def dsm_loss(data: KdeDataModel, schedule: NoiseSchedule, i: int,
             score: ScoreFunction, m_samples: int, seed: RunSeed) -> float:
    """Denoising score-matching objective at step i.

    Monte Carlo average, over data draws and kernel noise, of the squared
    residual between the candidate score at the perturbed point and the
    conditional kernel score (mean - x_perturbed) / var. Its minimizer over
    score functions is the marginal score.
    """
    if m_samples < 1:
        raise ValueError("need at least one sample")
    schedule.check_step(i)
    rng = generator(seed)
    idx = rng.integers(0, data.n_points, size=m_samples)
    x0 = data.points[idx]
    if data.bandwidth > 0:
        x0 = x0 + data.bandwidth * rng.standard_normal(x0.shape)
    z = rng.standard_normal(x0.shape)
    if schedule.kind == "ve":
        var = float(schedule.sigmas[i - 1] ** 2)
        mean = x0
    else:
        abar = float(schedule.alpha_bars[i - 1])
        var = 1.0 - abar
        mean = np.sqrt(abar) * x0
    xt = mean + np.sqrt(var) * z
    target = (mean - xt) / var
    resid = score(xt, i) - target
    return float(np.mean(np.sum(resid**2, axis=-1)))


def reverse_step_params(schedule: NoiseSchedule, j: int, x: np.ndarray,
                        score_value: np.ndarray, sampler: str) -> tuple[np.ndarray, float]:
    """Deterministic mean and noise scale for the reverse step j -> j-1.

    The score is evaluated at level j; VE uses sigma_0 = 0 so the final
    ancestral step is noiseless.
    """
    if sampler not in SAMPLERS:
        raise ValueError(f"sampler must be one of {SAMPLERS}")
    schedule.check_step(j)
    if schedule.kind == "ve":
        s2_j = float(schedule.sigmas[j - 1] ** 2)
        s2_prev = float(schedule.sigmas[j - 2] ** 2) if j >= 2 else 0.0
        mean = x + (s2_j - s2_prev) * score_value
        if sampler == "ancestral":
            std = np.sqrt(s2_prev * (s2_j - s2_prev) / s2_j)
        else:
            std = np.sqrt(s2_j - s2_prev)
        return mean, float(std)
    beta = float(schedule.betas[j - 1])
    if sampler == "ancestral":
        mean = (x + beta * score_value) / np.sqrt(1.0 - beta)
    else:
        mean = (2.0 - np.sqrt(1.0 - beta)) * x + beta * score_value
    return mean, float(np.sqrt(beta))


def reverse_sample(schedule: NoiseSchedule, score: ScoreFunction, sampler: str,
                   n_paths: int, seed: RunSeed) -> np.ndarray:
    """Run the full reverse process and return the final samples, shape (N, d).

    Paths start from the schedule's prior, N(0, sigma_max^2 I) for VE and
    N(0, I) for VP. Each path's randomness occupies a contiguous block of the
    counter-based stream, so path p is identical no matter how many paths run.
    """
    if n_paths < 1:
        raise ValueError("need at least one path")
    if score.kind is not None and score.kind != schedule.kind:
        raise ValueError(f"score was built for a '{score.kind}' schedule, got '{schedule.kind}'")
    n = schedule.n_steps
    rng = generator(seed)
    draws = rng.standard_normal((n_paths, n + 1, score.dim))
    x = draws[:, 0] * (schedule.sigmas[-1] if schedule.kind == "ve" else 1.0)
    for j in range(n, 0, -1):
        mean, std = reverse_step_params(schedule, j, x, score(x, j), sampler)
        x = mean + std * draws[:, n - j + 1]
    return x


# ---------------------------------------------------------------------------
# Cross-module score identity


@dataclass(frozen=True)
class ScoreIdentityReport:
    analytic: np.ndarray
    smoothed: np.ndarray
    deviation: float
    passed: bool


def smoothed_score_identity_check(data: KdeDataModel, schedule: NoiseSchedule, i: int,
                                  x: np.ndarray, grid=None,
                                  tolerance: float = 1e-6) -> ScoreIdentityReport:
    """Check that the mixture score equals the smoothed-energy gradient.

    With E := log of the (suitably scaled) data density and phi := the forward
    kernel at step i, the smoothed energy is the log marginal, so its gradient
    must match analytic_score. The smoothed side runs through the quadrature
    machinery (bandwidth > 0) or a discrete-atom sum differentiated by central
    finite differences (bandwidth = 0), both independent of the mixture-score
    algebra's responsibility weighting.
    """
    from .smoothed import QuadratureGrid, SmoothedEnergy, smoothed_gradient

    x = np.atleast_1d(np.asarray(x, dtype=float))
    if data.dim > 2:
        raise ValueError("quadrature cross-check supports one or two dimensions")
    schedule.check_step(i)
    reference = analytic_score(data, schedule, i, x)

    # Split the marginal into base density (data side) and smoothing kernel.
    if schedule.kind == "ve":
        base_points, base_h = data.points, data.bandwidth
        kernel_var = float(schedule.sigmas[i - 1] ** 2)
    else:
        abar = float(schedule.alpha_bars[i - 1])
        base_points = np.sqrt(abar) * data.points
        base_h = np.sqrt(abar) * data.bandwidth
        kernel_var = 1.0 - abar
    sigma = np.sqrt(kernel_var)

    if base_h > 0:
        base = KdeDataModel(base_points, bandwidth=base_h)
        if grid is None:
            # Cover data and query plus 6 bandwidths, then for_kernel adds 8
            # kernel deviations; spacing resolves the narrower of the two scales.
            lo = np.minimum(base_points.min(axis=0), x) - 6.0 * base_h
            hi = np.maximum(base_points.max(axis=0), x) + 6.0 * base_h
            points_per_std = max(8.0, 8.0 * sigma / min(base_h, sigma))
            grid = QuadratureGrid.for_kernel(
                [(float(lo[k]), float(hi[k])) for k in range(data.dim)],
                sigma, pad_stds=8.0, points_per_std=points_per_std)
        se = SmoothedEnergy(FunctionEnergy(lambda u: kde_log_density(base, u),
                                           dim=data.dim, vectorized=True),
                            NoiseKernel(np.full(data.dim, kernel_var), tau=1.0), grid=grid)
        smoothed = smoothed_gradient(se, x)
    else:
        kernel = NoiseKernel(np.full(data.dim, kernel_var), tau=1.0)

        def atom_log_density(u):
            u = np.atleast_2d(u)
            logs = kernel.log_density(u[:, None, :] - base_points[None, :, :])
            return logsumexp(logs, axis=1) - np.log(data.n_points)

        step = 1e-6 * max(1.0, float(np.max(np.abs(x))))
        smoothed = np.empty_like(x)
        for k in range(x.size):
            e_k = np.zeros_like(x)
            e_k[k] = step
            hi = float(atom_log_density((x + e_k)[None, :])[0])
            lo = float(atom_log_density((x - e_k)[None, :])[0])
            smoothed[k] = (hi - lo) / (2.0 * step)

    scale = max(1.0, float(np.max(np.abs(reference))))
    deviation = float(np.max(np.abs(smoothed - reference)))
    return ScoreIdentityReport(analytic=reference, smoothed=smoothed,
                               deviation=deviation, passed=deviation <= tolerance * scale)
