import numpy as np
import pytest

from gibbs_control.core import RunSeed
from gibbs_control.envs import (
    double_integrator,
    energy_of,
    make_environment,
    pendulum,
    pointmass2d,
    rollout,
    rollout_batch,
)


class TestDoubleIntegrator:
    def test_equilibrium_zero_controls(self):
        env = double_integrator(x0=(0.0, 0.0))
        traj = rollout(env.dynamics, env.cost, env.x0, np.zeros((12, 1)))
        assert np.all(traj.states == 0.0)
        assert traj.total_cost == pytest.approx(0.0)

    def test_ten_step_recurrence_oracle(self):
        # p_{t+1} = p_t + v_t dt, v_{t+1} = v_t + u dt with u = 1, dt = 0.1:
        # v_t = 0.1 t and p_10 = dt^2 * (0+1+...+9) = 0.45.
        env = double_integrator()
        traj = rollout(env.dynamics, env.cost, np.zeros(2), np.ones((10, 1)))
        p, v = 0.0, 0.0
        for _ in range(10):
            p, v = p + v * 0.1, v + 1.0 * 0.1
        assert traj.states[-1, 0] == pytest.approx(p, rel=1e-15)
        assert traj.states[-1, 1] == pytest.approx(v, rel=1e-15)
        assert p == pytest.approx(0.45)

    def test_total_cost_matches_manual_accumulation(self):
        env = double_integrator()
        controls = np.linspace(-1, 1, 8)[:, None]
        traj = rollout(env.dynamics, env.cost, np.array([1.0, 0.0]), controls)
        manual = sum(float(env.cost.running(traj.states[t], controls[t]))
                     for t in range(8)) + float(env.cost.terminal(traj.states[-1]))
        assert traj.total_cost == pytest.approx(manual, rel=1e-10)


class TestPendulum:
    def test_upright_unstable_equilibrium(self):
        env = pendulum()
        traj = rollout(env.dynamics, env.cost, np.array([np.pi, 0.0]), np.zeros((40, 1)))
        assert np.max(np.abs(traj.states[:, 0] - np.pi)) < 1e-12
        assert np.max(np.abs(traj.states[:, 1])) < 1e-12

    def test_hanging_is_stationary(self):
        env = pendulum()
        traj = rollout(env.dynamics, env.cost, np.zeros(2), np.zeros((10, 1)))
        assert np.all(traj.states == 0.0)


class TestRollout:
    def test_dimension_mismatch_rejected(self):
        env = double_integrator()
        with pytest.raises(ValueError):
            rollout(env.dynamics, env.cost, np.zeros(3), np.zeros((5, 1)))
        with pytest.raises(ValueError):
            rollout_batch(env.dynamics, env.cost, np.zeros(2), np.zeros((2, 5, 3)))

    def test_trajectory_reconstruction_bit_exact(self):
        env = pendulum()
        rng = np.random.default_rng(4)
        controls = rng.standard_normal((20, 1))
        traj = rollout(env.dynamics, env.cost, env.x0, controls)
        x = env.x0.copy()
        for t in range(20):
            x = env.dynamics.step(x, controls[t])
            assert np.array_equal(np.asarray(x), traj.states[t + 1])

    def test_cost_additivity_across_split(self):
        # Running costs accumulate: J(full) = running(first half) + J(second half from midpoint).
        env = double_integrator()
        rng = np.random.default_rng(5)
        controls = rng.standard_normal((12, 1))
        full = rollout(env.dynamics, env.cost, env.x0, controls)
        first = controls[:5]
        x = env.x0.copy()
        running = 0.0
        for t in range(5):
            running += float(env.cost.running(x, first[t]))
            x = env.dynamics.step(x, first[t])
        rest = rollout(env.dynamics, env.cost, x, controls[5:])
        assert full.total_cost == pytest.approx(running + rest.total_cost, rel=1e-12)

    def test_batch_matches_serial(self):
        env = pendulum()
        rng = np.random.default_rng(6)
        us = rng.standard_normal((16, 9, 1))
        states, costs = rollout_batch(env.dynamics, env.cost, env.x0, us)
        for k in range(16):
            traj = rollout(env.dynamics, env.cost, env.x0, us[k])
            assert np.array_equal(states[k], traj.states)
            assert costs[k] == pytest.approx(traj.total_cost, rel=1e-12)

    def test_process_noise_requires_seed_and_is_reproducible(self):
        from gibbs_control.envs import DynamicsModel

        env = double_integrator()
        noisy = DynamicsModel(2, 1, env.dynamics.step, process_noise=0.1)
        with pytest.raises(ValueError):
            rollout(noisy, env.cost, env.x0, np.zeros((4, 1)))
        a = rollout(noisy, env.cost, env.x0, np.zeros((4, 1)), seed=RunSeed(3))
        b = rollout(noisy, env.cost, env.x0, np.zeros((4, 1)), seed=RunSeed(3))
        assert np.array_equal(a.states, b.states)


class TestEnergyOf:
    def test_sign_identity(self):
        env = double_integrator(x0=(0.0, 0.0))
        energy = energy_of(env.dynamics, env.cost, np.zeros(2))
        assert energy.evaluate(np.zeros(10)) == pytest.approx(0.0)

    def test_energy_is_negative_cost(self):
        env = pendulum()
        energy = energy_of(env.dynamics, env.cost, env.x0)
        controls = np.full((15, 1), 0.3)
        traj = rollout(env.dynamics, env.cost, env.x0, controls)
        assert energy.evaluate(controls.ravel()) == pytest.approx(-traj.total_cost, rel=1e-12)

    def test_collision_energy_strictly_below_clear_path(self):
        env = pointmass2d()
        energy = energy_of(env.dynamics, env.cost, env.x0)
        horizon = 20
        # Straight through the obstacle: accelerate along +x, then coast.
        through = np.zeros((horizon, 2))
        through[:4, 0] = 3.0
        # Detour: initial upward arc keeps lateral clearance.
        around = np.array(through)
        around[:4, 1] = 3.0
        around[8:12, 1] = -3.0
        e_through = energy.evaluate(through.ravel())
        e_around = energy.evaluate(around.ravel())
        assert e_through < e_around - env.params["obstacle_weight"]

    def test_flat_and_shaped_inputs_agree(self):
        env = pendulum()
        energy = energy_of(env.dynamics, env.cost, env.x0)
        rng = np.random.default_rng(8)
        us = rng.standard_normal((6, 5, 1))
        flat = energy.evaluate_batch(us.reshape(6, -1))
        shaped = energy.evaluate_batch(us)
        assert flat == pytest.approx(shaped, rel=1e-14)


class TestRegistry:
    def test_known_environments(self):
        for name in ("double_integrator", "pendulum", "pointmass2d"):
            env = make_environment(name)
            assert env.name == name

    def test_unknown_environment_rejected(self):
        with pytest.raises(ValueError):
            make_environment("cartpole")

    def test_params_pass_through(self):
        env = make_environment("pendulum", dt=0.02, gravity=9.0)
        assert env.params["dt"] == 0.02
        assert env.params["gravity"] == 9.0

    def test_pointmass_drag_bounds(self):
        with pytest.raises(ValueError):
            pointmass2d(drag=1.0)
