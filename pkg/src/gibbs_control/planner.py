"""Guided diffusion planning: reverse diffusion under a demonstration prior.

A plan is one flat vector of per-step [state, action] blocks. Planning runs
the reverse diffusion process under a kernel-density prior fit to
demonstrations; each reverse step denoises toward the data, shifts the mean by
alpha * Sigma * grad E(mean) to fold in an optimization objective, samples with
the step covariance Sigma, and clamps the first state slots to the observed
state. Executing only the first action and replanning gives the receding-
horizon loop.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import EnergyModel, FunctionEnergy, RunSeed, generator, logsumexp, worker_count
from .diffusion import (
    KdeDataModel,
    NoiseSchedule,
    ScoreFunction,
    analytic_score,
    marginal_mixture_params,
    reverse_step_params,
)
from .envs import Environment

__all__ = [
    "GuidanceFailure",
    "PlanLayout",
    "PlanPrior",
    "TrajectoryPlan",
    "GuidanceConfig",
    "EpisodeLog",
    "conditioned_score",
    "clamped_score",
    "denoise_mean",
    "guided_reverse_step",
    "plan_and_execute",
    "nav_guidance_energy",
    "synthetic_nav_demos",
]


class GuidanceFailure(RuntimeError):
    """The guidance gradient came back non-finite for some plan slots."""


@dataclass(frozen=True)
class PlanLayout:
    """Slot layout of a flat plan: horizon blocks of [state, action]."""

    horizon: int
    state_dim: int
    action_dim: int

    def __post_init__(self) -> None:
        if self.horizon < 1 or self.state_dim < 1 or self.action_dim < 1:
            raise ValueError("horizon and dimensions must be at least 1")

    @property
    def block(self) -> int:
        return self.state_dim + self.action_dim

    @property
    def dim(self) -> int:
        return self.horizon * self.block

    def state_slots(self, t: int) -> slice:
        start = t * self.block
        return slice(start, start + self.state_dim)

    def action_slots(self, t: int) -> slice:
        start = t * self.block + self.state_dim
        return slice(start, start + self.action_dim)

    def pack(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float)
        if states.shape != (self.horizon, self.state_dim):
            raise ValueError("states must have shape (horizon, state_dim)")
        if actions.shape != (self.horizon, self.action_dim):
            raise ValueError("actions must have shape (horizon, action_dim)")
        return np.concatenate([states, actions], axis=1).ravel()

    def states(self, flat: np.ndarray) -> np.ndarray:
        return np.asarray(flat, dtype=float).reshape(self.horizon, self.block)[:, :self.state_dim]

    def actions(self, flat: np.ndarray) -> np.ndarray:
        return np.asarray(flat, dtype=float).reshape(self.horizon, self.block)[:, self.state_dim:]


@dataclass(frozen=True)
class PlanPrior:
    """Demonstration prior: a KDE over flat plan vectors plus their layout."""

    data: KdeDataModel
    layout: PlanLayout

    def __post_init__(self) -> None:
        if self.data.dim != self.layout.dim:
            raise ValueError("prior dimensionality must match the plan layout")


@dataclass(frozen=True)
class TrajectoryPlan:
    """A flat plan vector at a given reverse-diffusion step index."""

    values: np.ndarray
    step_index: int
    layout: PlanLayout

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.layout.dim,):
            raise ValueError(f"plan vector must have shape ({self.layout.dim},)")
        object.__setattr__(self, "values", v)
        if self.step_index < 0:
            raise ValueError("step index must be non-negative")

    def first_action(self) -> np.ndarray:
        return self.values[self.layout.action_slots(0)].copy()


@dataclass(frozen=True)
class GuidanceConfig:
    """Guidance scale, objective, and the per-step covariance policy.

    The step covariance defaults to the reverse sampler's own noise variance;
    variance_override pins it to a fixed value instead. The guidance gradient
    is computed by central finite differences over plan slots unless the
    energy exposes an analytic `gradient` attribute.
    """

    alpha: float = 0.0
    energy: EnergyModel | None = None
    variance_override: float | None = None
    fd_step: float = 1e-4

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError("guidance scale alpha must be non-negative")
        if self.alpha > 0 and self.energy is None:
            raise ValueError("positive alpha requires a guidance energy")
        if self.variance_override is not None and self.variance_override <= 0:
            raise ValueError("variance override must be positive")


def guidance_gradient(energy: EnergyModel, point: np.ndarray, fd_step: float = 1e-4) -> np.ndarray:
    """Central-difference gradient of the guidance energy over plan slots."""
    grad_fn = getattr(energy, "gradient", None)
    if callable(grad_fn):
        return np.asarray(grad_fn(point), dtype=float)
    d = point.size
    h = fd_step * np.maximum(1.0, np.abs(point))
    offsets = np.zeros((d, d))
    np.fill_diagonal(offsets, h)
    vals = np.asarray(energy.evaluate_batch(
        np.concatenate([point[None, :] + offsets, point[None, :] - offsets])), dtype=float)
    return (vals[:d] - vals[d:]) / (2.0 * h)


def conditioned_score(prior: PlanPrior, schedule: NoiseSchedule, i: int,
                      plan_values: np.ndarray,
                      observed_state: np.ndarray | None) -> np.ndarray:
    """Mixture score of the plan marginal, conditioned on the clamped slots.

    The first state slots are written with the observed state and re-clamped
    after every reverse step, so they carry no step noise: their component
    likelihood is evaluated at the data bandwidth, while the free slots use
    the step's marginal variance. Without an observed state this reduces to
    the unconditional mixture score.
    """
    if observed_state is None:
        return analytic_score(prior.data, schedule, i, plan_values)
    means, var = marginal_mixture_params(prior.data, schedule, i)
    h2 = prior.data.bandwidth**2
    if h2 <= 0:
        raise ValueError("conditioning on clamped slots requires a positive bandwidth")
    s0 = prior.layout.state_slots(0)
    observed = np.asarray(observed_state, dtype=float)
    raw_s0 = prior.data.points[:, s0]
    logits = (-0.5 * np.sum((observed[None, :] - raw_s0) ** 2, axis=1) / h2
              - 0.5 * np.sum((plan_values[None, :] - means) ** 2, axis=1) / var)
    resp = np.exp(logits - logsumexp(logits))
    return (resp @ means - plan_values) / var


def clamped_score(prior: PlanPrior, schedule: NoiseSchedule,
                  observed_state: np.ndarray) -> ScoreFunction:
    """ScoreFunction view of the conditioned score, usable by reverse_sample."""
    observed = np.asarray(observed_state, dtype=float)

    def evaluator(x: np.ndarray, i: int) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return conditioned_score(prior, schedule, i, x, observed)
        return np.stack([conditioned_score(prior, schedule, i, row, observed) for row in x])

    return ScoreFunction(evaluator=evaluator, dim=prior.layout.dim, kind=schedule.kind)


def denoise_mean(prior: PlanPrior, schedule: NoiseSchedule, plan: TrajectoryPlan,
                 i: int | None = None, sampler: str = "ancestral",
                 observed_state: np.ndarray | None = None) -> np.ndarray:
    """Posterior-mean denoiser: the reverse step's mean with the noise zeroed."""
    if i is None:
        i = plan.step_index
    schedule.check_step(i)
    score = conditioned_score(prior, schedule, i, plan.values, observed_state)
    mean, _ = reverse_step_params(schedule, i, plan.values, score, sampler)
    return mean


def guided_reverse_step(plan: TrajectoryPlan, prior: PlanPrior, schedule: NoiseSchedule,
                        guidance: GuidanceConfig, observed_state: np.ndarray,
                        seed: RunSeed | None = None, noise: np.ndarray | None = None,
                        sampler: str = "ancestral") -> TrajectoryPlan:
    """One guided reverse step: denoise, shift by alpha*Sigma*grad E, sample, clamp.

    The sampled plan is N(mean + alpha * Sigma * grad E(mean), Sigma) with Sigma
    the sampler's step covariance (or the configured override), after which the
    first state slots are overwritten with the observed state.
    """
    i = plan.step_index
    if i < 1:
        raise ValueError("plan is already fully denoised")
    mu = denoise_mean(prior, schedule, plan, i, sampler=sampler,
                      observed_state=observed_state)
    _, std = reverse_step_params(schedule, i, plan.values,
                                 np.zeros_like(plan.values), sampler)
    var = guidance.variance_override if guidance.variance_override is not None else float(std) ** 2

    mean = mu
    if guidance.alpha > 0:
        grad = guidance_gradient(guidance.energy, mu, guidance.fd_step)
        bad = np.flatnonzero(~np.isfinite(grad))
        if bad.size:
            raise GuidanceFailure(f"non-finite guidance gradient at plan slots {bad.tolist()}")
        mean = mu + guidance.alpha * var * grad

    if noise is None:
        if seed is None:
            raise ValueError("provide either a seed or an explicit noise vector")
        noise = generator(seed).standard_normal(plan.layout.dim)
    new_values = mean + np.sqrt(var) * np.asarray(noise, dtype=float)

    observed_state = np.asarray(observed_state, dtype=float)
    new_values[plan.layout.state_slots(0)] = observed_state
    return TrajectoryPlan(values=new_values, step_index=i - 1, layout=plan.layout)


@dataclass(frozen=True)
class EpisodeLog:
    """Outcome of one receding-horizon planning episode."""

    episode: int
    success: bool
    steps: int
    final_goal_distance: float
    min_clearance: float
    total_cost: float
    states: np.ndarray
    actions: np.ndarray
    last_plan: np.ndarray | None = None


def _run_episode(env: Environment, prior: PlanPrior, schedule: NoiseSchedule,
                 guidance: GuidanceConfig, episode: int, seed: RunSeed,
                 step_cap: int, goal_radius: float, sampler: str) -> EpisodeLog:
    rng = generator(seed.derive(episode))
    layout = prior.layout
    goal = env.info.get("goal")
    obstacle_center = env.info.get("obstacle_center")
    obstacle_radius = env.info.get("obstacle_radius", 0.0)
    pos = slice(0, env.info.get("position_dims", np.asarray(env.x0).size))

    x = np.asarray(env.x0, dtype=float).copy()
    states = [x.copy()]
    actions = []
    total_cost = 0.0
    success = False
    last_plan = None

    prior_std = float(schedule.sigmas[-1]) if schedule.kind == "ve" else 1.0
    for _ in range(step_cap):
        if goal is not None and float(np.linalg.norm(x[pos] - goal)) < goal_radius:
            success = True
            break
        draws = rng.standard_normal((schedule.n_steps + 1, layout.dim))
        plan = TrajectoryPlan(values=prior_std * draws[0], step_index=schedule.n_steps,
                              layout=layout)
        for j in range(schedule.n_steps, 0, -1):
            plan = guided_reverse_step(plan, prior, schedule, guidance, x,
                                       noise=draws[schedule.n_steps - j + 1], sampler=sampler)
        last_plan = plan.values.copy()
        a0 = plan.first_action()
        total_cost += float(env.cost.running(x, a0))
        x = np.asarray(env.dynamics.step(x, a0), dtype=float)
        actions.append(a0)
        states.append(x.copy())
    else:
        # Step cap exhausted without reaching the goal; check the final state.
        if goal is not None and float(np.linalg.norm(x[pos] - goal)) < goal_radius:
            success = True

    total_cost += float(env.cost.terminal(x))
    states_arr = np.asarray(states)
    if obstacle_center is not None:
        clearances = np.linalg.norm(states_arr[:, pos] - obstacle_center, axis=-1) - obstacle_radius
        min_clearance = float(np.min(clearances))
    else:
        min_clearance = np.inf
    final_dist = float(np.linalg.norm(x[pos] - goal)) if goal is not None else np.nan
    return EpisodeLog(episode=episode, success=success, steps=len(actions),
                      final_goal_distance=final_dist, min_clearance=min_clearance,
                      total_cost=total_cost, states=states_arr,
                      actions=np.asarray(actions) if actions else np.zeros((0, layout.action_dim)),
                      last_plan=last_plan)


def plan_and_execute(env: Environment, prior: PlanPrior, schedule: NoiseSchedule,
                     guidance: GuidanceConfig, episodes: int, seed: RunSeed,
                     step_cap: int = 40, goal_radius: float = 0.1,
                     sampler: str = "ancestral") -> list[EpisodeLog]:
    """Run seeded planning episodes; a step-cap exhaustion is a failed episode.

    Each episode replans from scratch every environment step (fresh Gaussian
    plan, full guided reverse pass, execute the first action). Episodes use
    independent derived streams, so results are identical whether they run
    serially or across the GIBBS_CONTROL_THREADS worker pool.
    """
    if episodes < 1:
        raise ValueError("need at least one episode")
    if step_cap < 1:
        raise ValueError("step cap must be at least 1")

    def run(e: int) -> EpisodeLog:
        return _run_episode(env, prior, schedule, guidance, e, seed,
                            step_cap, goal_radius, sampler)

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, range(episodes)))
    return [run(e) for e in range(episodes)]


def nav_guidance_energy(env: Environment, layout: PlanLayout, goal_weight: float = 1.0,
                        obstacle_weight: float = 2.0, margin: float = 0.05,
                        sharpness: float = 0.05) -> EnergyModel:
    """Goal-distance guidance with a softplus obstacle margin over plan positions.

    E(plan) = -goal_weight * ||p_last - goal||^2
              -obstacle_weight * sum_t softplus((radius + margin - dist_t) / sharpness)
    """
    goal = np.asarray(env.info["goal"], dtype=float)
    center = env.info.get("obstacle_center")
    radius = float(env.info.get("obstacle_radius", 0.0))
    n_pos = goal.size
    block = layout.block
    horizon = layout.horizon

    def fn(plans):
        plans = np.atleast_2d(np.asarray(plans, dtype=float))
        pos = plans.reshape(len(plans), horizon, block)[:, :, :n_pos]
        value = -goal_weight * np.sum((pos[:, -1] - goal) ** 2, axis=-1)
        if center is not None and obstacle_weight > 0:
            dist = np.linalg.norm(pos - np.asarray(center), axis=-1)
            value = value - obstacle_weight * np.sum(
                np.logaddexp(0.0, (radius + margin - dist) / sharpness), axis=-1)
        return value

    return FunctionEnergy(fn, dim=layout.dim, vectorized=True)


# ---------------------------------------------------------------------------
# Synthetic demonstrations


def synthetic_nav_demos(env: Environment, count: int, horizon: int, seed: RunSeed,
                        avoid_obstacle: bool = True, clearance: float = 0.25,
                        lateral_spread: float = 0.2, noise_scale: float = 0.01,
                        travel_steps: int = 26, parked_steps: int = 8,
                        side: str = "up") -> np.ndarray:
    """Noisy smooth start-to-goal demonstrations, shape (count, horizon*(n+m)).

    Source paths follow a smoothed (minimum-jerk blended with constant-rate)
    progress profile along the start-goal line, detour laterally around the
    obstacle with at least `clearance` beyond its radius, and then park at the
    goal. Each demonstration is one horizon-length window of a source path at
    a random phase, so the prior covers every stage of the task including
    stopping at the goal; receding-horizon execution needs those later phases.
    Actions are the consistent per-step velocities (p_{t+1} - p_t) / dt.

    The plan layout matches the environment: states are [position, velocity]
    with velocities taken as consistent path differences, and actions are the
    accelerations that reproduce the path under the environment's drag,
    a_t = (v_{t+1} - (1 - drag) v_t) / dt.

    side chooses the detour family: "up", "down", or "alternate". A one-sided
    demonstrator keeps the prior unimodal, so independent replans agree; the
    alternating variant exists to study mode ambiguity. With avoid_obstacle
    False the detour is dropped and paths run straight through the scene: a
    deliberately unsafe prior for comparisons.
    """
    if side not in ("up", "down", "alternate"):
        raise ValueError("side must be 'up', 'down', or 'alternate'")
    goal = env.info.get("goal")
    center = env.info.get("obstacle_center", None)
    radius = float(env.info.get("obstacle_radius", 0.0))
    if goal is None:
        raise ValueError("environment must declare a goal")
    if travel_steps + parked_steps < horizon + 2:
        raise ValueError("source paths must be at least one window long")
    rng = generator(seed)
    start_pos = np.asarray(env.x0, dtype=float)[:2]
    direction = goal - start_pos
    perp = np.array([-direction[1], direction[0]])
    perp = perp / np.linalg.norm(perp)

    # Progress profile: minimum-jerk plus a start-weighted ramp, so the initial
    # velocity is nonzero while the landing at the goal stays smooth; parked
    # steps extend the path at the goal.
    s = np.linspace(0.0, 1.0, travel_steps + 1)
    min_jerk = 10 * s**3 - 15 * s**4 + 6 * s**5
    progress = min_jerk + 0.5 * s * (1.0 - s) ** 2
    progress = np.concatenate([progress, np.ones(parked_steps + 1)])

    layout = PlanLayout(horizon=horizon, state_dim=env.dynamics.n, action_dim=env.dynamics.m)
    demos = np.empty((count, layout.dim))
    for k in range(count):
        if side == "alternate":
            sign = 1.0 if k % 2 == 0 else -1.0
        else:
            sign = 1.0 if side == "up" else -1.0
        if avoid_obstacle and center is not None:
            offset = radius + clearance + rng.uniform(0.0, lateral_spread)
        else:
            offset = 0.0
        path = (start_pos[None, :] + progress[:, None] * direction[None, :]
                + sign * offset * np.sin(np.pi * progress)[:, None] * perp[None, :])
        # Differentiate the smooth path, then jitter each slot type at its own
        # scale; differencing a jittered path would blow the noise up by 1/dt^2.
        drag = float(env.params.get("drag", 0.0))
        velocities = (path[1:] - path[:-1]) / env.dt
        accels = (velocities[1:] - (1.0 - drag) * velocities[:-1]) / env.dt
        start = int(rng.integers(0, accels.shape[0] - horizon + 1))
        window = slice(start, start + horizon)
        states = np.concatenate([path[window], velocities[window]], axis=1)
        states = states + noise_scale * rng.standard_normal(states.shape)
        actions = accels[window] + 2.0 * noise_scale * rng.standard_normal((horizon, 2))
        demos[k] = layout.pack(states, actions)
    return demos
