import numpy as np
import pytest

from gibbs_control.core import GibbsMeasure, NoiseKernel, OutOfSupportError, RunSeed
from gibbs_control.smoothed import (
    QuadratureGrid,
    SmoothedEnergy,
    check_mppi_equivalence,
    constant_energy,
    double_well_energy,
    fourier_energy,
    gibbs_density,
    gibbs_free_energy,
    gibbs_log_partition,
    gradient_ascent_step,
    jensen_bound_check,
    normalize_gibbs,
    quadratic_energy,
    smoothed_energy,
    smoothed_energy_batch,
    smoothed_gradient,
)


def gaussian_setup(sigma2=1.0, tau=1.0, span=3.0):
    kernel = NoiseKernel(np.array([sigma2]), tau=tau)
    grid = QuadratureGrid.for_kernel([(-span, span)], np.sqrt(sigma2), pad_stds=8.0,
                                     points_per_std=16.0)
    return SmoothedEnergy(quadratic_energy(1.0), kernel, grid=grid)


class TestQuadratureGrid:
    def test_minimum_point_count(self):
        with pytest.raises(ValueError):
            QuadratureGrid((np.linspace(0, 1, 8),))

    def test_weights_integrate_constant(self):
        grid = QuadratureGrid.uniform((-1.0, 1.0), 101)
        assert np.exp(grid.log_weights).sum() == pytest.approx(2.0, rel=1e-12)

    def test_2d_points_and_weights(self):
        grid = QuadratureGrid.uniform([(-1.0, 1.0), (0.0, 2.0)], [33, 17])
        assert grid.points.shape == (33 * 17, 2)
        assert np.exp(grid.log_weights).sum() == pytest.approx(4.0, rel=1e-12)

    def test_dimension_cap(self):
        with pytest.raises(ValueError):
            QuadratureGrid(tuple(np.linspace(0, 1, 20) for _ in range(3)))

    def test_interior_check(self):
        grid = QuadratureGrid.uniform((-1.0, 1.0), 64)
        grid.require_interior(np.array([0.0]), 0.5)
        with pytest.raises(OutOfSupportError):
            grid.require_interior(np.array([0.9]), 0.5)


class TestSmoothedEnergyValidation:
    def test_mode_and_grid_requirements(self):
        kernel = NoiseKernel(np.array([1.0]))
        grid = QuadratureGrid.uniform((-1.0, 1.0), 32)
        with pytest.raises(ValueError):
            SmoothedEnergy(quadratic_energy(1.0), kernel, grid=grid, mode="analytic")
        with pytest.raises(ValueError):
            SmoothedEnergy(quadratic_energy(1.0), kernel)  # quadrature needs a grid
        with pytest.raises(ValueError):
            SmoothedEnergy(quadratic_energy(1.0), kernel, mode="monte-carlo")
        with pytest.raises(ValueError):
            # Grid dimension must match the kernel dimension.
            SmoothedEnergy(quadratic_energy(1.0, dim=2), NoiseKernel(np.array([1.0, 1.0])),
                           grid=grid)


class TestSmoothedEnergyGaussian:
    def test_constant_energy_unchanged(self):
        kernel = NoiseKernel(np.array([0.25]))
        grid = QuadratureGrid.for_kernel([(-1.0, 1.0)], 0.5, pad_stds=8.0)
        se = SmoothedEnergy(constant_energy(1.3), kernel, grid=grid)
        for u in (-0.8, 0.0, 0.6):
            assert smoothed_energy(se, np.array([u])) == pytest.approx(1.3, abs=1e-7)

    def test_gaussian_closed_form_value(self):
        # E(u) = -u^2/2 convolved with N(0, s2):
        # smoothed(u) = -u^2/(2(1+s2)) - log(1+s2)/2.
        for s2 in (0.25, 1.0, 2.0):
            se = gaussian_setup(s2)
            for u in (-1.5, 0.0, 0.7, 2.0):
                expected = -u**2 / (2 * (1 + s2)) - 0.5 * np.log(1 + s2)
                assert smoothed_energy(se, np.array([u])) == pytest.approx(expected, abs=1e-9)

    def test_gaussian_closed_form_gradient(self):
        se = gaussian_setup(1.0)
        for u in (-2.0, -0.3, 1.0):
            assert smoothed_gradient(se, np.array([u]))[0] == pytest.approx(
                -u / 2.0, abs=1e-9)

    def test_gradient_matches_finite_differences(self):
        seed = RunSeed(17)
        kernel = NoiseKernel(np.array([0.09]))
        grid = QuadratureGrid.for_kernel([(-2.5, 2.5)], 0.3, pad_stds=8.0,
                                         points_per_std=12.0)
        rng = np.random.default_rng(11)
        for name, energy in (("fourier", fourier_energy(seed)),
                             ("well", double_well_energy())):
            se = SmoothedEnergy(energy, kernel, grid=grid)
            for _ in range(25):
                u = np.array([rng.uniform(-2.0, 2.0)])
                g = smoothed_gradient(se, u)[0]
                h = 1e-5
                fd = (smoothed_energy(se, u + h) - smoothed_energy(se, u - h)) / (2 * h)
                assert g == pytest.approx(fd, rel=1e-4, abs=1e-8)

    def test_sigma_to_zero_limit(self):
        # At sigma = 1e-3 the smoothed energy collapses onto E for smooth energies.
        kernel = NoiseKernel(np.array([1e-6]))
        grid = QuadratureGrid.for_kernel([(-2.0, 2.0)], 1e-3, pad_stds=8.0,
                                         points_per_std=4.0)
        energy = fourier_energy(RunSeed(3))
        se = SmoothedEnergy(energy, kernel, grid=grid)
        queries = np.linspace(-2, 2, 41)[:, None]
        gap = np.abs(smoothed_energy_batch(se, queries) - energy(queries))
        assert float(gap.max()) < 1e-3

    def test_out_of_support_raises(self):
        se = gaussian_setup(1.0, span=1.0)
        with pytest.raises(OutOfSupportError):
            smoothed_energy(se, np.array([8.5]))

    def test_monte_carlo_mode_agrees_with_quadrature(self):
        energy = double_well_energy()
        kernel = NoiseKernel(np.array([0.25]))
        grid = QuadratureGrid.for_kernel([(-2.0, 2.0)], 0.5, pad_stds=8.0)
        quad = SmoothedEnergy(energy, kernel, grid=grid)
        mc = SmoothedEnergy(energy, kernel, mode="monte-carlo", mc_samples=400_000,
                            seed=RunSeed(19))
        u = np.array([0.6])
        assert smoothed_energy(mc, u) == pytest.approx(smoothed_energy(quad, u), abs=5e-3)
        assert smoothed_gradient(mc, u)[0] == pytest.approx(
            smoothed_gradient(quad, u)[0], abs=2e-2)

    def test_monotone_approach_in_sigma(self):
        energy = fourier_energy(RunSeed(23))
        queries = np.linspace(-2, 2, 81)[:, None]
        gaps = []
        for sigma in (0.5, 0.2, 0.1, 0.01):
            kernel = NoiseKernel(np.array([sigma**2]))
            grid = QuadratureGrid.for_kernel([(-2.0, 2.0)], sigma, pad_stds=8.0,
                                             points_per_std=8.0)
            se = SmoothedEnergy(energy, kernel, grid=grid)
            gaps.append(float(np.max(np.abs(smoothed_energy_batch(se, queries)
                                            - energy(queries)))))
        assert all(a >= b - 1e-9 for a, b in zip(gaps[:-1], gaps[1:]))


class TestGradientAscentStep:
    def test_fixed_point_at_zero_gradient(self):
        se = gaussian_setup(1.0)
        u = np.array([0.0])
        assert gradient_ascent_step(se, u) == pytest.approx(u, abs=1e-12)

    def test_gaussian_shrinkage(self):
        for s2 in (0.5, 1.0, 3.0):
            se = gaussian_setup(s2)
            u = np.array([1.2])
            assert gradient_ascent_step(se, u)[0] == pytest.approx(
                1.2 / (1 + s2), abs=1e-9)

    def test_iterates_form_geometric_sequence(self):
        se = gaussian_setup(1.0)
        u = np.array([1.0])
        values = [1.0]
        for _ in range(4):
            u = gradient_ascent_step(se, u)
            values.append(float(u[0]))
        assert values == pytest.approx([1.0, 0.5, 0.25, 0.125, 0.0625], abs=1e-8)

    def test_general_temperature_scaling(self):
        # For E(u) = -u^2/2 smoothed as exp(E/tau), the expected MPPI/ascent step
        # from u is u * tau / (s2 + tau).
        s2, tau = 0.8, 2.5
        kernel = NoiseKernel(np.array([s2]), tau=tau)
        grid = QuadratureGrid.for_kernel([(-2.0, 2.0)], np.sqrt(s2), pad_stds=8.0,
                                         points_per_std=16.0)
        se = SmoothedEnergy(quadratic_energy(1.0), kernel, grid=grid)
        u = np.array([1.0])
        assert gradient_ascent_step(se, u)[0] == pytest.approx(tau / (s2 + tau), abs=1e-9)

    def test_symmetric_double_well_midpoint_gradient_zero(self):
        energy = double_well_energy(tilt=0.0)
        kernel = NoiseKernel(np.array([0.25]))
        grid = QuadratureGrid.for_kernel([(-2.0, 2.0)], 0.5, pad_stds=8.0)
        se = SmoothedEnergy(energy, kernel, grid=grid)
        assert smoothed_gradient(se, np.array([0.0]))[0] == pytest.approx(0.0, abs=1e-9)


class TestTwoDimensional:
    def test_isotropic_gaussian_closed_form(self):
        # E(u) = -||u||^2/2 under an isotropic kernel: the d = 2 closed form
        # gains one log(1+s2) per dimension.
        s2 = 0.5
        kernel = NoiseKernel(np.array([s2, s2]))
        grid = QuadratureGrid.for_kernel([(-1.5, 1.5), (-1.5, 1.5)], np.sqrt(s2),
                                         pad_stds=7.0, points_per_std=6.0)
        se = SmoothedEnergy(quadratic_energy(1.0, dim=2), kernel, grid=grid)
        u = np.array([0.8, -0.6])
        expected = -np.dot(u, u) / (2 * (1 + s2)) - np.log(1 + s2)
        assert smoothed_energy(se, u) == pytest.approx(expected, abs=1e-7)
        assert smoothed_gradient(se, u) == pytest.approx(-u / (1 + s2), abs=1e-7)

    def test_full_covariance_kernel_closed_form(self):
        # Convolving exp(-||u||^2/2) with N(0, S) gives a Gaussian with
        # covariance I + S; the ascent step is (I + S)^{-1} u.
        cov = np.array([[0.5, 0.2], [0.2, 0.3]])
        kernel = NoiseKernel(cov)
        top_std = np.sqrt(np.diag(cov).max())
        grid = QuadratureGrid.for_kernel([(-1.5, 1.5), (-1.5, 1.5)], top_std,
                                         pad_stds=7.0, points_per_std=6.0)
        se = SmoothedEnergy(quadratic_energy(1.0, dim=2), kernel, grid=grid)
        u = np.array([1.0, -0.5])
        m = np.eye(2) + cov
        expected_value = -0.5 * u @ np.linalg.solve(m, u) - 0.5 * np.log(np.linalg.det(m))
        assert smoothed_energy(se, u) == pytest.approx(expected_value, abs=1e-6)
        assert smoothed_gradient(se, u) == pytest.approx(-np.linalg.solve(m, u), abs=1e-6)
        step = gradient_ascent_step(se, u)
        assert step == pytest.approx(np.linalg.solve(m, u), abs=1e-6)


class TestMppiEquivalence:
    def test_gaussian_equivalence_report(self):
        report = check_mppi_equivalence(
            quadratic_energy(1.0), NoiseKernel(np.array([1.0])), np.array([1.0]),
            RunSeed(31), sample_counts=(100, 1000, 10000), replicates=8)
        assert report.target_step == pytest.approx([0.5], abs=1e-9)
        assert report.passed
        rms = report.rms_errors()
        assert rms[0] > rms[-1]

    def test_constant_energy_both_steps_vanish(self):
        report = check_mppi_equivalence(
            constant_energy(2.0), NoiseKernel(np.array([0.49])), np.array([0.3]),
            RunSeed(37), sample_counts=(10_000,), replicates=4)
        assert report.target_step == pytest.approx([0.3], abs=1e-9)
        assert report.passed

    def test_double_well_equivalence(self):
        report = check_mppi_equivalence(
            double_well_energy(), NoiseKernel(np.array([0.16])), np.array([0.4]),
            RunSeed(41), sample_counts=(1000, 100_000), replicates=8)
        assert report.passed

    def test_equivalence_holds_for_general_temperature(self):
        # tau != 1: the sampled step still estimates the quadrature ascent
        # step, u * tau / (s2 + tau) for the quadratic energy.
        s2, tau = 1.0, 2.5
        report = check_mppi_equivalence(
            quadratic_energy(1.0), NoiseKernel(np.array([s2]), tau=tau), np.array([1.0]),
            RunSeed(43), sample_counts=(1000, 50_000), replicates=8)
        assert report.target_step == pytest.approx([tau / (s2 + tau)], abs=1e-8)
        assert report.passed


class TestJensenBound:
    def test_constant_energy_equality(self):
        kernel = NoiseKernel(np.array([0.25]))
        grid = QuadratureGrid.for_kernel([(-1.0, 1.0)], 0.5, pad_stds=8.0)
        se = SmoothedEnergy(constant_energy(0.9), kernel, grid=grid)
        value, lower = jensen_bound_check(se, np.array([0.2]))
        assert value == pytest.approx(lower, abs=1e-9)

    def test_quadratic_closed_forms_both_sides(self):
        s2 = 0.49
        se = gaussian_setup(s2)
        for u in (0.0, 1.0, -1.0, 2.0, -2.0):
            value, lower = jensen_bound_check(se, np.array([u]))
            assert value == pytest.approx(-u**2 / (2 * (1 + s2)) - 0.5 * np.log(1 + s2),
                                          abs=1e-8)
            assert lower == pytest.approx(-(u**2 + s2) / 2.0, abs=1e-8)
            assert value >= lower - 1e-9

    def test_violation_detection(self):
        # A tolerance of -1 forces the assertion to trip for a genuine bound gap.
        se = gaussian_setup(1.0)
        with pytest.raises(AssertionError):
            value, lower = jensen_bound_check(se, np.array([0.0]), tolerance=-1.0)


class TestGibbsFreeEnergy:
    def test_uniform_density_entropy(self):
        grid = QuadratureGrid.uniform((-2.0, 2.0), 401)
        volume = 4.0
        q = np.full(grid.points.shape[0], 1.0 / volume)
        c, tau = 0.7, 1.3
        g = gibbs_free_energy(grid, q, constant_energy(c), tau)
        assert g == pytest.approx(c + tau * np.log(volume), rel=1e-9)

    def test_gibbs_density_attains_tau_log_z(self):
        grid = QuadratureGrid.uniform((-3.5, 3.5), 1201)
        energy = double_well_energy()
        for tau in (0.5, 1.0, 2.0):
            log_z = gibbs_log_partition(grid, energy, tau)
            p_star = gibbs_density(grid, energy, tau)
            g_star = gibbs_free_energy(grid, p_star, energy, tau)
            assert g_star == pytest.approx(tau * log_z, abs=1e-9)

    def test_random_densities_never_beat_gibbs(self):
        grid = QuadratureGrid.uniform((-3.5, 3.5), 801)
        energy = double_well_energy()
        tau = 0.7
        log_z = gibbs_log_partition(grid, energy, tau)
        p_star = gibbs_density(grid, energy, tau)
        g_star = gibbs_free_energy(grid, p_star, energy, tau)
        w = np.exp(grid.log_weights)
        rng = np.random.default_rng(43)
        for _ in range(100):
            q = p_star * np.exp(0.5 * rng.standard_normal(p_star.shape))
            q /= float(w @ q)
            assert gibbs_free_energy(grid, q, energy, tau) < g_star

    def test_unnormalized_density_rejected(self):
        grid = QuadratureGrid.uniform((-1.0, 1.0), 101)
        q = np.full(grid.points.shape[0], 1.0)  # integrates to 2
        with pytest.raises(ValueError):
            gibbs_free_energy(grid, q, constant_energy(0.0), 1.0)

    def test_normalize_gibbs_measure(self):
        # The grid reaches +-8 standard deviations so tail truncation stays
        # below the tolerance.
        grid = QuadratureGrid.uniform((-8.0, 8.0), 2001)
        measure = GibbsMeasure(quadratic_energy(1.0), tau=1.0)
        normalized = normalize_gibbs(measure, grid)
        # Z = sqrt(2 pi) for exp(-u^2/2).
        assert normalized.log_partition == pytest.approx(0.5 * np.log(2 * np.pi), abs=1e-9)


class TestSmoothedDensityIdentity:
    def test_convolved_gibbs_equals_exp_smoothed_over_z(self):
        # Quadrature of (p* conv phi)(u) must match exp(smoothed(u)/tau)/Z with
        # one shared Z on both sides.
        energy = double_well_energy()
        for tau in (1.0, 2.0):
            kernel = NoiseKernel(np.array([0.36]), tau=tau)
            grid = QuadratureGrid.for_kernel([(-3.0, 3.0)], 0.6, pad_stds=8.0,
                                             points_per_std=12.0)
            log_z = gibbs_log_partition(grid, energy, tau)
            p_star = gibbs_density(grid, energy, tau)
            se = SmoothedEnergy(energy, kernel, grid=grid)
            w = np.exp(grid.log_weights)
            pts = grid.points
            for u in (-1.2, 0.0, 0.8):
                uarr = np.array([u])
                phi = np.exp(kernel.log_density(uarr[None, :] - pts))
                convolved = float(w @ (p_star * phi))
                smoothed_side = np.exp(smoothed_energy(se, uarr) / tau - log_z)
                assert convolved == pytest.approx(smoothed_side, rel=1e-6)
