"""Discrete-time benchmark systems with running/terminal costs.

Each environment bundles a dynamics model x_{t+1} = F(x_t, u_t), a cost
J(U) = sum_t C(x_t, u_t) + C_f(x_T), and a start state. Energies are always
E(U) = -J(U), which keeps one sign convention across the whole package.

Step and cost functions are written to broadcast over leading batch axes, so a
whole perturbation batch rolls out in one vectorized pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .core import ControlSequence, EnergyModel, RunSeed, generator

__all__ = [
    "DynamicsModel",
    "CostModel",
    "Trajectory",
    "Environment",
    "rollout",
    "rollout_batch",
    "energy_of",
    "RolloutEnergy",
    "make_environment",
    "ENVIRONMENTS",
    "softplus",
]


def softplus(x: np.ndarray) -> np.ndarray:
    """log(1 + exp(x)) without overflow."""
    return np.logaddexp(0.0, x)


@dataclass(frozen=True)
class DynamicsModel:
    """Deterministic step function with optional additive Gaussian process noise.

    step maps states (..., n) and controls (..., m) to next states (..., n) and
    must broadcast over leading axes. process_noise > 0 adds N(0, scale^2 I) to
    every stepped state, which makes rollout energies random variables; the
    default keeps dynamics deterministic.
    """

    n: int
    m: int
    step: Callable[[np.ndarray, np.ndarray], np.ndarray]
    process_noise: float = 0.0

    def __post_init__(self) -> None:
        if self.n < 1 or self.m < 1:
            raise ValueError("state and control dimensions must be at least 1")
        if self.process_noise < 0:
            raise ValueError("process-noise scale must be non-negative")


@dataclass(frozen=True)
class CostModel:
    """Running cost C(x, u) and terminal cost C_f(x), both batch-broadcasting."""

    running: Callable[[np.ndarray, np.ndarray], np.ndarray]
    terminal: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class Trajectory:
    """A rolled-out path: states (T+1, n), controls (T, m), and its total cost."""

    states: np.ndarray
    controls: np.ndarray
    total_cost: float

    def __post_init__(self) -> None:
        states = np.asarray(self.states, dtype=float)
        controls = np.asarray(self.controls, dtype=float)
        if states.ndim != 2 or controls.ndim != 2 or states.shape[0] != controls.shape[0] + 1:
            raise ValueError("states must be (T+1, n) and controls (T, m)")
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "controls", controls)

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]


@dataclass(frozen=True)
class Environment:
    """Named bundle of dynamics, cost, start state, and plotting/planning info."""

    name: str
    dynamics: DynamicsModel
    cost: CostModel
    x0: np.ndarray
    dt: float
    params: dict = field(default_factory=dict)
    info: dict = field(default_factory=dict)


def _as_sequences(us: np.ndarray, control_dim: int) -> np.ndarray:
    """Accept (..., T, m) or flattened (..., T*m) control arrays."""
    us = np.asarray(us, dtype=float)
    if us.ndim >= 2 and us.shape[-1] == control_dim:
        return us
    if us.shape[-1] % control_dim != 0:
        raise ValueError("flattened controls do not divide into steps of the control dimension")
    return us.reshape(*us.shape[:-1], -1, control_dim)


def rollout_batch(dynamics: DynamicsModel, cost: CostModel, x0: np.ndarray,
                  us: np.ndarray, seed: RunSeed | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Roll out a batch of control sequences from a shared start state.

    Args:
        us: controls shaped (N, T, m).
    Returns:
        (states, costs): states (N, T+1, n) and total costs (N,), ordered by
        sample index regardless of how the batch is evaluated.
    """
    us = np.asarray(us, dtype=float)
    n_batch, horizon, m = us.shape
    if m != dynamics.m:
        raise ValueError(f"control dimension {m} does not match dynamics ({dynamics.m})")
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (dynamics.n,):
        raise ValueError(f"start state must have shape ({dynamics.n},)")

    noise = None
    if dynamics.process_noise > 0:
        if seed is None:
            raise ValueError("process noise requires a seed")
        rng = generator(seed)
        noise = dynamics.process_noise * rng.standard_normal((n_batch, horizon, dynamics.n))

    states = np.empty((n_batch, horizon + 1, dynamics.n))
    states[:, 0] = x0
    costs = np.zeros(n_batch)
    x = np.broadcast_to(x0, (n_batch, dynamics.n)).copy()
    for t in range(horizon):
        u = us[:, t]
        costs += np.asarray(cost.running(x, u), dtype=float)
        x = np.asarray(dynamics.step(x, u), dtype=float)
        if noise is not None:
            x = x + noise[:, t]
        states[:, t + 1] = x
    costs += np.asarray(cost.terminal(x), dtype=float)
    return states, costs


def rollout(dynamics: DynamicsModel, cost: CostModel, x0: np.ndarray,
            controls, seed: RunSeed | None = None) -> Trajectory:
    """Roll out one control sequence and return the trajectory with its cost."""
    if isinstance(controls, ControlSequence):
        us = controls.values
    else:
        us = np.atleast_2d(np.asarray(controls, dtype=float))
    states, costs = rollout_batch(dynamics, cost, x0, us[None, ...], seed=seed)
    return Trajectory(states=states[0], controls=us, total_cost=float(costs[0]))


class RolloutEnergy(EnergyModel):
    """E(U) = -J(U) evaluated by rolling out the dynamics from a fixed start state."""

    def __init__(self, dynamics: DynamicsModel, cost: CostModel, x0: np.ndarray,
                 seed: RunSeed | None = None):
        self.dynamics = dynamics
        self.cost = cost
        self.x0 = np.asarray(x0, dtype=float)
        self.seed = seed

    def evaluate(self, u: np.ndarray) -> float:
        return float(self.evaluate_batch(np.asarray(u, dtype=float)[None, ...])[0])

    def evaluate_batch(self, us: np.ndarray) -> np.ndarray:
        us = _as_sequences(us, self.dynamics.m)
        if us.ndim == 2:
            us = us[None, ...]
        _, costs = rollout_batch(self.dynamics, self.cost, self.x0, us, seed=self.seed)
        return -costs


def energy_of(dynamics: DynamicsModel, cost: CostModel, x0: np.ndarray,
              seed: RunSeed | None = None) -> RolloutEnergy:
    """Unified energy E(U) := -J(U) for this system and start state."""
    return RolloutEnergy(dynamics, cost, x0, seed=seed)


# ---------------------------------------------------------------------------
# Benchmark environments
#
# Every factory takes keyword parameters (all optional) and documents exactly
# the keys it reads; the same keys are accepted under "params" in experiment
# configs.


def double_integrator(dt: float = 0.1, pos_weight: float = 1.0, vel_weight: float = 0.1,
                      control_weight: float = 0.01, terminal_pos_weight: float = 10.0,
                      terminal_vel_weight: float = 1.0, x0=(1.0, 0.0)) -> Environment:
    """1D double integrator: state [p, v], control accel u.

    p' = p + v*dt, v' = v + u*dt. Quadratic cost toward the origin.
    Config keys: dt, pos_weight, vel_weight, control_weight,
    terminal_pos_weight, terminal_vel_weight, x0.
    """

    def step(x, u):
        p = x[..., 0] + x[..., 1] * dt
        v = x[..., 1] + u[..., 0] * dt
        return np.stack([p, v], axis=-1)

    def running(x, u):
        return (pos_weight * x[..., 0] ** 2 + vel_weight * x[..., 1] ** 2
                + control_weight * u[..., 0] ** 2)

    def terminal(x):
        return terminal_pos_weight * x[..., 0] ** 2 + terminal_vel_weight * x[..., 1] ** 2

    params = dict(dt=dt, pos_weight=pos_weight, vel_weight=vel_weight,
                  control_weight=control_weight, terminal_pos_weight=terminal_pos_weight,
                  terminal_vel_weight=terminal_vel_weight, x0=list(x0))
    return Environment("double_integrator", DynamicsModel(2, 1, step), CostModel(running, terminal),
                       np.asarray(x0, dtype=float), dt, params=params)


def pendulum(dt: float = 0.05, gravity: float = 9.81, length: float = 1.0,
             angle_weight: float = 6.0, velocity_weight: float = 0.1,
             control_weight: float = 0.01, terminal_angle_weight: float = 12.0,
             terminal_velocity_weight: float = 0.6, x0=(0.0, 0.0)) -> Environment:
    """Pendulum swing-up: state [theta, omega], control torque u.

    theta'' = -(g/l) sin(theta) + u with semi-implicit Euler stepping; theta = 0
    hangs down, theta = pi is the upright target. Cost keys: dt, gravity,
    length, angle_weight, velocity_weight, control_weight,
    terminal_angle_weight, terminal_velocity_weight, x0.
    """

    def step(x, u):
        omega = x[..., 1] + (-(gravity / length) * np.sin(x[..., 0]) + u[..., 0]) * dt
        theta = x[..., 0] + omega * dt
        return np.stack([theta, omega], axis=-1)

    def upright_error(theta):
        # 1 + cos(theta) vanishes exactly at the upright position.
        return 1.0 + np.cos(theta)

    def running(x, u):
        return (angle_weight * upright_error(x[..., 0]) ** 2
                + velocity_weight * x[..., 1] ** 2
                + control_weight * u[..., 0] ** 2)

    def terminal(x):
        return (terminal_angle_weight * upright_error(x[..., 0]) ** 2
                + terminal_velocity_weight * x[..., 1] ** 2)

    params = dict(dt=dt, gravity=gravity, length=length, angle_weight=angle_weight,
                  velocity_weight=velocity_weight, control_weight=control_weight,
                  terminal_angle_weight=terminal_angle_weight,
                  terminal_velocity_weight=terminal_velocity_weight, x0=list(x0))
    return Environment("pendulum", DynamicsModel(2, 1, step), CostModel(running, terminal),
                       np.asarray(x0, dtype=float), dt, params=params)


def pointmass2d(dt: float = 0.1, goal=(2.0, 0.0), obstacle_center=(1.0, 0.0),
                obstacle_radius: float = 0.3, drag: float = 0.15,
                goal_weight: float = 1.0, vel_weight: float = 0.05,
                control_weight: float = 0.02, obstacle_weight: float = 40.0,
                obstacle_sharpness: float = 0.05, terminal_weight: float = 20.0,
                terminal_vel_weight: float = 1.0,
                x0=(0.0, 0.0, 0.0, 0.0)) -> Environment:
    """2D point mass with viscous drag and one circular obstacle.

    State is [px, py, vx, vy], control the commanded acceleration:
    p' = p + v*dt, v' = (1 - drag) v + u*dt. The obstacle enters the cost as a
    smooth softplus penalty of penetration depth, so energies stay finite and
    the Gibbs framing applies. Goal and obstacle refer to the position slice.
    Config keys: dt, goal, obstacle_center, obstacle_radius, drag, goal_weight,
    vel_weight, control_weight, obstacle_weight, obstacle_sharpness,
    terminal_weight, terminal_vel_weight, x0.
    """
    goal_arr = np.asarray(goal, dtype=float)
    center = np.asarray(obstacle_center, dtype=float)
    if not 0 <= drag < 1:
        raise ValueError("drag must lie in [0, 1)")

    def step(x, u):
        p = x[..., :2] + x[..., 2:] * dt
        v = (1.0 - drag) * x[..., 2:] + u * dt
        return np.concatenate([p, v], axis=-1)

    def obstacle_penalty(x):
        dist = np.linalg.norm(x[..., :2] - center, axis=-1)
        return obstacle_weight * softplus((obstacle_radius - dist) / obstacle_sharpness)

    def running(x, u):
        goal_err = np.sum((x[..., :2] - goal_arr) ** 2, axis=-1)
        return (goal_weight * goal_err + vel_weight * np.sum(x[..., 2:] ** 2, axis=-1)
                + control_weight * np.sum(u**2, axis=-1) + obstacle_penalty(x))

    def terminal(x):
        return (terminal_weight * np.sum((x[..., :2] - goal_arr) ** 2, axis=-1)
                + terminal_vel_weight * np.sum(x[..., 2:] ** 2, axis=-1)
                + obstacle_penalty(x))

    params = dict(dt=dt, goal=list(goal), obstacle_center=list(obstacle_center),
                  obstacle_radius=obstacle_radius, drag=drag, goal_weight=goal_weight,
                  vel_weight=vel_weight, control_weight=control_weight,
                  obstacle_weight=obstacle_weight, obstacle_sharpness=obstacle_sharpness,
                  terminal_weight=terminal_weight, terminal_vel_weight=terminal_vel_weight,
                  x0=list(x0))
    info = dict(goal=goal_arr, obstacle_center=center, obstacle_radius=obstacle_radius,
                position_dims=2)
    return Environment("pointmass2d", DynamicsModel(4, 2, step), CostModel(running, terminal),
                       np.asarray(x0, dtype=float), dt, params=params, info=info)


ENVIRONMENTS: dict[str, Callable[..., Environment]] = {
    "double_integrator": double_integrator,
    "pendulum": pendulum,
    "pointmass2d": pointmass2d,
}


def make_environment(name: str, **params) -> Environment:
    """Instantiate a registered environment from config-style keyword parameters."""
    if name not in ENVIRONMENTS:
        raise ValueError(f"unknown environment '{name}'; known: {sorted(ENVIRONMENTS)}")
    return ENVIRONMENTS[name](**params)
