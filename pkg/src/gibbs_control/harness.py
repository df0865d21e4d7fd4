"""Experiment harness: JSON configs in, run directories with CSV/JSON/SVG out.

One run writes a timestamped directory <method>-<utcstamp>-<seed> containing
config.resolved.json (every default materialized), metrics.csv, summary.json,
and the method's figures. Rerunning from a resolved config reproduces
metrics.csv byte-identically; only wall time in summary.json may differ.

CLI: gibbs-control <mppi|pg|diffuse|plan|verify> --config PATH [--seed N] [--out DIR]
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import plots
from .core import NoiseKernel, PerturbationBatch, RunSeed, generator, sample_perturbations
from .diffusion import (
    KdeDataModel,
    NoiseSchedule,
    ScoreFunction,
    analytic_score,
    dsm_loss,
    kde_log_density,
    log_marginal,
    reverse_sample,
    smoothed_score_identity_check,
)
from .envs import energy_of, make_environment
from .mppi import MppiConfig, mppi_control_loop
from .planner import (
    GuidanceConfig,
    PlanLayout,
    PlanPrior,
    nav_guidance_energy,
    plan_and_execute,
    synthetic_nav_demos,
)
from .policygrad import GaussianOpenLoopPolicy, check_pg_mppi_identity, pg_estimate
from .smoothed import (
    QuadratureGrid,
    SmoothedEnergy,
    check_mppi_equivalence,
    double_well_energy,
    fourier_energy,
    gibbs_density,
    gibbs_free_energy,
    gibbs_log_partition,
    jensen_bound_check,
    quadratic_energy,
    smoothed_energy_batch,
)

__all__ = ["ConfigError", "ExperimentConfig", "RunRecord", "run_experiment", "main"]

METHODS = ("mppi", "pg", "diffuse", "plan", "verify")


class ConfigError(ValueError):
    """Invalid experiment configuration; carries the offending field path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"field '{path}': {message}")


def _find_key_line(text: str, key: str) -> int | None:
    token = f'"{key}"'
    for lineno, line in enumerate(text.splitlines(), start=1):
        if token in line:
            return lineno
    return None


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated configuration: the method plus its fully-resolved parameters."""

    method: str
    resolved: dict

    @property
    def seed(self) -> int:
        return int(self.resolved["seed"])


@dataclass
class RunRecord:
    """Everything one experiment produced, as written to its run directory."""

    config: dict
    metrics: list
    summary: dict
    fieldnames: list
    run_dir: Path | None = None
    passed: bool | None = None


# ---------------------------------------------------------------------------
# Validation


def _validate_kernel(raw: dict, path: str) -> dict:
    kernel = dict(raw or {})
    sigma = kernel.get("sigma", 1.0)
    tau = kernel.get("tau", 1.0)
    sig = np.atleast_1d(np.asarray(sigma, dtype=float))
    _require(np.all(sig > 0) and np.all(np.isfinite(sig)), f"{path}.sigma",
             "must be a positive scalar or list")
    _require(isinstance(tau, (int, float)) and tau > 0, f"{path}.tau", "must be > 0")
    return {"sigma": [float(s) for s in sig], "tau": float(tau)}


def _validate_schedule(raw: dict, path: str, default_kind: str = "ve") -> dict:
    sched = dict(raw or {})
    kind = sched.get("kind", default_kind)
    _require(kind in ("ve", "vp"), f"{path}.kind", "must be 've' or 'vp'")
    steps = int(sched.get("steps", 1000))
    _require(steps >= 1, f"{path}.steps", "must be >= 1")
    out = {"kind": kind, "steps": steps}
    if kind == "ve":
        out["sigma_min"] = float(sched.get("sigma_min", 0.01))
        out["sigma_max"] = float(sched.get("sigma_max", 10.0))
        _require(0 < out["sigma_min"] < out["sigma_max"], f"{path}.sigma_min",
                 "need 0 < sigma_min < sigma_max")
    else:
        out["beta_min"] = float(sched.get("beta_min", 1e-4))
        out["beta_max"] = float(sched.get("beta_max", 0.02))
        _require(0 < out["beta_min"] <= out["beta_max"] < 1, f"{path}.beta_min",
                 "need 0 < beta_min <= beta_max < 1")
    return out


def _build_schedule(resolved: dict) -> NoiseSchedule:
    if resolved["kind"] == "ve":
        return NoiseSchedule.ve_geometric(resolved["sigma_min"], resolved["sigma_max"],
                                          resolved["steps"])
    return NoiseSchedule.vp_linear(resolved["beta_min"], resolved["beta_max"],
                                   resolved["steps"])


def _validate_environment(raw: dict, path: str) -> dict:
    env = dict(raw or {})
    name = env.get("name")
    _require(isinstance(name, str) and name, f"{path}.name", "environment name required")
    from .envs import ENVIRONMENTS

    _require(name in ENVIRONMENTS, f"{path}.name",
             f"unknown environment; known: {sorted(ENVIRONMENTS)}")
    params = env.get("params", {})
    _require(isinstance(params, dict), f"{path}.params", "must be an object")
    try:
        make_environment(name, **params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}.params", str(exc)) from None
    return {"name": name, "params": params}


def validate_config(raw: dict, method: str | None = None) -> ExperimentConfig:
    """Check every field against the module preconditions and fill defaults."""
    _require(isinstance(raw, dict), "", "config must be a JSON object")
    cfg_method = raw.get("method", method)
    _require(cfg_method in METHODS, "method", f"must be one of {METHODS}")
    if method is not None:
        _require(cfg_method == method, "method",
                 f"config is for '{cfg_method}' but the '{method}' subcommand was invoked")
    seed = raw.get("seed", 0)
    _require(isinstance(seed, int) and 0 <= seed < 2**64, "seed",
             "must be an unsigned 64-bit integer")
    out = {"method": cfg_method, "seed": seed,
           "output_dir": str(raw.get("output_dir", "runs"))}

    if cfg_method in ("mppi", "pg"):
        out["environment"] = _validate_environment(raw.get("environment"), "environment")
        out["kernel"] = _validate_kernel(raw.get("kernel"), "kernel")
        out["samples"] = int(raw.get("samples", 1024))
        _require(out["samples"] >= 1, "samples", "must be >= 1")
        out["horizon"] = int(raw.get("horizon", 30))
        _require(out["horizon"] >= 1, "horizon", "must be >= 1")
        out["iterations"] = int(raw.get("iterations", 1 if cfg_method == "mppi" else 20))
        _require(out["iterations"] >= 1, "iterations", "must be >= 1")
        if cfg_method == "mppi":
            out["steps"] = int(raw.get("steps", 100))
            _require(out["steps"] >= 1, "steps", "must be >= 1")
            out["regularized"] = bool(raw.get("regularized", False))
    elif cfg_method == "diffuse":
        out["schedule"] = _validate_schedule(raw.get("schedule"), "schedule")
        data = dict(raw.get("data") or {})
        points = data.get("points", [[-1.0], [1.0]])
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        _require(pts.size > 0 and np.all(np.isfinite(pts)), "data.points",
                 "must be a non-empty array of finite points")
        bandwidth = float(data.get("bandwidth", 0.0))
        _require(bandwidth >= 0, "data.bandwidth", "must be >= 0")
        out["data"] = {"points": pts.tolist(), "bandwidth": bandwidth}
        sampler = raw.get("sampler", "both")
        _require(sampler in ("ancestral", "reverse-diffusion", "both"), "sampler",
                 "must be 'ancestral', 'reverse-diffusion', or 'both'")
        out["sampler"] = sampler
        out["paths"] = int(raw.get("paths", 20000))
        _require(out["paths"] >= 1, "paths", "must be >= 1")
    elif cfg_method == "plan":
        out["environment"] = _validate_environment(
            raw.get("environment", {"name": "pointmass2d"}), "environment")
        out["schedule"] = _validate_schedule(raw.get("schedule", {
            "kind": "ve", "sigma_min": 0.01, "sigma_max": 1.0, "steps": 64}), "schedule")
        demos = dict(raw.get("demos") or {})
        out["demos"] = {
            "count": int(demos.get("count", 200)),
            "horizon": int(demos.get("horizon", 16)),
            "seed": int(demos.get("seed", 7)),
            "bandwidth": float(demos.get("bandwidth", 0.04)),
            "travel_steps": int(demos.get("travel_steps", 32)),
            "parked_steps": int(demos.get("parked_steps", 8)),
            "side": str(demos.get("side", "up")),
            "avoid_obstacle": bool(demos.get("avoid_obstacle", True)),
        }
        _require(out["demos"]["count"] >= 1, "demos.count", "must be >= 1")
        _require(out["demos"]["horizon"] >= 1, "demos.horizon", "must be >= 1")
        _require(out["demos"]["bandwidth"] > 0, "demos.bandwidth",
                 "must be > 0 (state conditioning needs it)")
        guidance = dict(raw.get("guidance") or {})
        out["guidance"] = {
            "alpha": float(guidance.get("alpha", 1.0)),
            "goal_weight": float(guidance.get("goal_weight", 1.0)),
            "obstacle_weight": float(guidance.get("obstacle_weight", 2.0)),
            "margin": float(guidance.get("margin", 0.05)),
            "sharpness": float(guidance.get("sharpness", 0.05)),
        }
        _require(out["guidance"]["alpha"] >= 0, "guidance.alpha", "must be >= 0")
        out["episodes"] = int(raw.get("episodes", 50))
        _require(out["episodes"] >= 1, "episodes", "must be >= 1")
        out["step_cap"] = int(raw.get("step_cap", 60))
        _require(out["step_cap"] >= 1, "step_cap", "must be >= 1")
        out["goal_radius"] = float(raw.get("goal_radius", 0.1))
        _require(out["goal_radius"] > 0, "goal_radius", "must be > 0")
        out["sampler"] = str(raw.get("sampler", "ancestral"))
        _require(out["sampler"] in ("ancestral", "reverse-diffusion"), "sampler",
                 "must be 'ancestral' or 'reverse-diffusion'")
    elif cfg_method == "verify":
        checks = raw.get("checks", "all")
        known = ("equivalence", "jensen", "free_energy", "pg_identity", "score", "dsm")
        if checks == "all":
            checks = list(known)
        _require(isinstance(checks, list) and checks, "checks",
                 f"must be 'all' or a non-empty list from {known}")
        for c in checks:
            _require(c in known, "checks", f"unknown check '{c}'")
        out["checks"] = checks
        sizes = dict(raw.get("sizes") or {})
        out["sizes"] = {
            "equivalence_counts": [int(n) for n in sizes.get(
                "equivalence_counts", [100, 1000, 10000, 100000])],
            "equivalence_replicates": int(sizes.get("equivalence_replicates", 16)),
            "jensen_energies": int(sizes.get("jensen_energies", 100)),
            "jensen_queries": int(sizes.get("jensen_queries", 100)),
            "free_energy_randoms": int(sizes.get("free_energy_randoms", 100)),
            "identity_samples": int(sizes.get("identity_samples", 64)),
            "score_points": int(sizes.get("score_points", 10)),
            "score_fd_points": int(sizes.get("score_fd_points", 100)),
            "dsm_samples": int(sizes.get("dsm_samples", 100000)),
        }
    return ExperimentConfig(method=cfg_method, resolved=out)


def load_config(path) -> tuple[dict, str]:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
    return raw, text


# ---------------------------------------------------------------------------
# Runners (one per method)


def _run_mppi(cfg: dict, seed: RunSeed) -> RunRecord:
    env = make_environment(cfg["environment"]["name"], **cfg["environment"]["params"])
    sigma = np.asarray(cfg["kernel"]["sigma"], dtype=float)
    if sigma.size == 1:
        sigma = np.full(env.dynamics.m, sigma[0])
    kernel = NoiseKernel(sigma**2, tau=cfg["kernel"]["tau"])
    mcfg = MppiConfig(kernel=kernel, samples=cfg["samples"], horizon=cfg["horizon"],
                      iterations=cfg["iterations"])
    result = mppi_control_loop(env.dynamics, env.cost, env.x0, mcfg, cfg["steps"], seed,
                               regularized=cfg["regularized"])
    fieldnames = ["step", "iteration", "best_energy", "mean_energy", "ess", "max_weight"]
    summary = {"executed_cost": result.executed.total_cost,
               "final_state": [float(v) for v in result.executed.states[-1]]}
    record = RunRecord(config=cfg, metrics=result.diagnostics, summary=summary,
                       fieldnames=fieldnames)
    record.extra_plots = [("best_energy.svg", "line", [
        ("best energy", np.array([r["step"] + r["iteration"] / max(cfg["iterations"], 1)
                                  for r in result.diagnostics]),
         np.array([r["best_energy"] for r in result.diagnostics]))],
        {"xlabel": "environment step", "ylabel": "best sampled energy"})]
    if env.name == "pointmass2d":
        record.overlay = {"executed": result.executed.states[:, :2],
                          "obstacle": (env.info["obstacle_center"], env.info["obstacle_radius"]),
                          "goal": env.info["goal"]}
    return record


def _run_pg(cfg: dict, seed: RunSeed) -> RunRecord:
    env = make_environment(cfg["environment"]["name"], **cfg["environment"]["params"])
    sigma = np.asarray(cfg["kernel"]["sigma"], dtype=float)
    if sigma.size == 1:
        sigma = np.full(env.dynamics.m, sigma[0])
    kernel = NoiseKernel(sigma**2, tau=cfg["kernel"]["tau"])
    energy = energy_of(env.dynamics, env.cost, env.x0)
    means = np.zeros((cfg["horizon"], env.dynamics.m))
    rows = []
    for it in range(cfg["iterations"]):
        policy = GaussianOpenLoopPolicy(means, kernel)
        vanilla = pg_estimate(policy, energy, cfg["samples"], seed.derive(it))
        report = check_pg_mppi_identity(policy, None, vanilla.batch)
        rows.append({
            "iteration": it,
            "objective": float(energy.evaluate(means.ravel())),
            "mean_sampled_return": float(np.mean(vanilla.batch.energies)),
            "best_return": float(np.max(vanilla.batch.energies)),
            "vanilla_grad_norm": float(np.linalg.norm(vanilla.gradient)),
            "exp_direction_norm": float(np.linalg.norm(report.exp_pg_direction)),
            "identity_residual": report.residual,
        })
        # Ascend along the exponential-objective direction (the MPPI step).
        means = means + report.mppi_direction
    fieldnames = ["iteration", "objective", "mean_sampled_return", "best_return",
                  "vanilla_grad_norm", "exp_direction_norm", "identity_residual"]
    summary = {"final_objective": float(energy.evaluate(means.ravel())),
               "max_identity_residual": max(r["identity_residual"] for r in rows)}
    record = RunRecord(config=cfg, metrics=rows, summary=summary, fieldnames=fieldnames)
    record.extra_plots = [("objective.svg", "line", [
        ("policy-mean return", np.array([r["iteration"] for r in rows]),
         np.array([r["objective"] for r in rows]))],
        {"xlabel": "iteration", "ylabel": "return of the mean control sequence"})]
    return record


def _run_diffuse(cfg: dict, seed: RunSeed) -> RunRecord:
    schedule = _build_schedule(cfg["schedule"])
    data = KdeDataModel(np.asarray(cfg["data"]["points"], dtype=float),
                        bandwidth=cfg["data"]["bandwidth"])
    score = ScoreFunction.from_kde(data, schedule)
    if cfg["sampler"] == "both":
        samplers = ["ancestral", "reverse-diffusion"]
    else:
        samplers = [cfg["sampler"]]
    target_m2 = float(np.mean(np.sum(data.points**2, axis=1)) + data.dim * data.bandwidth**2)
    rows = []
    all_samples = {}
    for si, sampler in enumerate(samplers):
        x = reverse_sample(schedule, score, sampler, cfg["paths"], seed.derive(si))
        all_samples[sampler] = x
        m1 = [float(v) for v in x.mean(axis=0)]
        m2 = float(np.mean(np.sum(x**2, axis=1)))
        rows.append({
            "sampler": sampler,
            "paths": cfg["paths"],
            "mean": m1[0] if len(m1) == 1 else json.dumps(m1),
            "second_moment": m2,
            "target_second_moment": target_m2,
            "se_mean": float(np.linalg.norm(x.std(axis=0, ddof=1)) / np.sqrt(len(x))),
            "se_second_moment": float(np.sum(x**2, axis=1).std(ddof=1) / np.sqrt(len(x))),
        })
    fieldnames = ["sampler", "paths", "mean", "second_moment", "target_second_moment",
                  "se_mean", "se_second_moment"]
    summary = {"samplers": samplers, "target_second_moment": target_m2}
    record = RunRecord(config=cfg, metrics=rows, summary=summary, fieldnames=fieldnames)
    record.samples = all_samples
    record.data = data
    return record


def _run_plan(cfg: dict, seed: RunSeed) -> RunRecord:
    env = make_environment(cfg["environment"]["name"], **cfg["environment"]["params"])
    d = cfg["demos"]
    demos = synthetic_nav_demos(env, d["count"], d["horizon"], RunSeed(d["seed"]),
                                avoid_obstacle=d["avoid_obstacle"],
                                travel_steps=d["travel_steps"],
                                parked_steps=d["parked_steps"], side=d["side"])
    layout = PlanLayout(d["horizon"], env.dynamics.n, env.dynamics.m)
    prior = PlanPrior(KdeDataModel(demos, bandwidth=d["bandwidth"]), layout)
    schedule = _build_schedule(cfg["schedule"])
    g = cfg["guidance"]
    guidance = GuidanceConfig(
        alpha=g["alpha"],
        energy=nav_guidance_energy(env, layout, g["goal_weight"], g["obstacle_weight"],
                                   g["margin"], g["sharpness"]) if g["alpha"] > 0 else None)
    logs = plan_and_execute(env, prior, schedule, guidance, cfg["episodes"], seed,
                            step_cap=cfg["step_cap"], goal_radius=cfg["goal_radius"],
                            sampler=cfg["sampler"])
    rows = [{
        "episode": log.episode,
        "success": int(log.success),
        "steps": log.steps,
        "final_goal_distance": log.final_goal_distance,
        "min_clearance": log.min_clearance,
        "total_cost": log.total_cost,
    } for log in logs]
    success_rate = float(np.mean([log.success for log in logs]))
    summary = {"success_rate": success_rate,
               "episodes": cfg["episodes"],
               "min_clearance": float(min(log.min_clearance for log in logs)),
               "collisions": int(sum(log.min_clearance < 0 for log in logs))}
    fieldnames = ["episode", "success", "steps", "final_goal_distance", "min_clearance",
                  "total_cost"]
    record = RunRecord(config=cfg, metrics=rows, summary=summary, fieldnames=fieldnames)
    record.logs = logs
    record.demos = demos
    record.layout = layout
    record.env = env
    return record


def _verify_rows(cfg: dict, seed: RunSeed) -> tuple[list, dict]:
    sizes = cfg["sizes"]
    rows = []
    extras = {}

    def add(claim, parameter, measured, tolerance, passed):
        rows.append({"claim": claim, "parameter": parameter, "measured": measured,
                     "tolerance": tolerance, "passed": int(bool(passed))})

    if "equivalence" in cfg["checks"]:
        energy = quadratic_energy(1.0)
        kernel = NoiseKernel(np.array([1.0]), tau=1.0)
        report = check_mppi_equivalence(
            energy, kernel, np.array([1.0]), seed.derive(1),
            sample_counts=tuple(sizes["equivalence_counts"]),
            replicates=sizes["equivalence_replicates"])
        for entry in report.entries:
            add("mppi_equivalence_rms", entry.n_samples, entry.rms_error, "", True)
        last = report.entries[-1]
        err = float(np.max(np.abs(last.mean_step - report.target_step)))
        add("mppi_equivalence_error", last.n_samples, err,
            float(3 * np.max(last.standard_error)), report.passed)
        add("mppi_equivalence_slope", "", report.slope, "-0.5 +/- 0.1",
            abs(report.slope + 0.5) <= 0.1)
        extras["equivalence"] = report

    if "jensen" in cfg["checks"]:
        worst_margin = np.inf
        worst_gap = 0.0
        sigma = 0.3
        kernel = NoiseKernel(np.array([sigma**2]), tau=1.0)
        small_kernel = NoiseKernel(np.array([1e-6]), tau=1.0)
        grid = QuadratureGrid.for_kernel([(-2.0, 2.0)], sigma, pad_stds=8.0,
                                         points_per_std=8.0)
        grid_small = QuadratureGrid.for_kernel([(-2.0, 2.0)], 1e-3, pad_stds=8.0,
                                               points_per_std=4.0)
        queries = np.linspace(-2.0, 2.0, sizes["jensen_queries"])[:, None]
        for k in range(sizes["jensen_energies"]):
            energy = fourier_energy(seed.derive(2, k))
            se = SmoothedEnergy(energy, kernel, grid=grid)
            for q in queries:
                val, lower = jensen_bound_check(se, q, tolerance=1e-6)
                worst_margin = min(worst_margin, val - lower)
            se_small = SmoothedEnergy(energy, small_kernel, grid=grid_small)
            smoothed_vals = smoothed_energy_batch(se_small, queries)
            exact_vals = energy(queries)
            worst_gap = max(worst_gap, float(np.max(np.abs(smoothed_vals - exact_vals))))
        add("jensen_lower_bound_margin", sigma, float(worst_margin), -1e-6,
            worst_margin >= -1e-6)
        add("smoothing_limit_gap", 1e-3, worst_gap, 1e-3, worst_gap < 1e-3)

    if "free_energy" in cfg["checks"]:
        energy = double_well_energy()
        tau = 0.7
        grid = QuadratureGrid.uniform((-3.5, 3.5), 801)
        log_z = gibbs_log_partition(grid, energy, tau)
        p_star = gibbs_density(grid, energy, tau)
        g_star = gibbs_free_energy(grid, p_star, energy, tau)
        add("free_energy_at_gibbs", tau, abs(g_star - tau * log_z), 1e-6,
            abs(g_star - tau * log_z) < 1e-6)
        rng = generator(seed.derive(3))
        w = np.exp(grid.log_weights)
        worst = -np.inf
        for _ in range(sizes["free_energy_randoms"]):
            q = p_star * np.exp(0.5 * rng.standard_normal(p_star.shape))
            q = q / float(w @ q)
            worst = max(worst, gibbs_free_energy(grid, q, energy, tau) - g_star)
        add("free_energy_optimality_gap", sizes["free_energy_randoms"], float(worst), 0.0,
            worst < 0.0)

    if "pg_identity" in cfg["checks"]:
        env = make_environment("pendulum")
        energy = energy_of(env.dynamics, env.cost, env.x0)
        kernel = NoiseKernel(np.array([4.0]), tau=1.0)
        policy = GaussianOpenLoopPolicy(np.zeros((15, 1)), kernel)
        batch = sample_perturbations(kernel, 15, sizes["identity_samples"], seed.derive(4))
        returns = energy.evaluate_batch(policy.means[None] + batch.perturbations)
        batch = PerturbationBatch(batch.perturbations, energies=returns)
        report = check_pg_mppi_identity(policy, None, batch)
        add("pg_mppi_identity_residual", sizes["identity_samples"], report.residual,
            1e-10, report.passed)
        add("pg_mppi_negative_control", sizes["identity_samples"], report.control_residual,
            "> 1e-6", report.control_residual > 1e-6)

    if "score" in cfg["checks"]:
        data = KdeDataModel(np.array([[-1.0], [1.0]]), bandwidth=0.25)
        schedule = NoiseSchedule.ve_geometric(0.1, 2.0, 10)
        rng = generator(seed.derive(5))
        worst = 0.0
        for _ in range(sizes["score_points"]):
            x = rng.uniform(-1.5, 1.5, size=1)
            i = int(rng.integers(1, schedule.n_steps + 1))
            rep = smoothed_score_identity_check(data, schedule, i, x)
            worst = max(worst, rep.deviation / max(1.0, float(np.max(np.abs(rep.analytic)))))
        add("score_unification_deviation", sizes["score_points"], worst, 1e-6, worst <= 1e-6)

        worst_fd = 0.0
        for _ in range(sizes["score_fd_points"]):
            x = float(rng.uniform(-2.0, 2.0))
            i = int(rng.integers(1, schedule.n_steps + 1))
            s = analytic_score(data, schedule, i, np.array([x]))[0]
            h = 1e-5 * max(1.0, abs(x))
            fd = (log_marginal(data, schedule, i, np.array([x + h]))
                  - log_marginal(data, schedule, i, np.array([x - h]))) / (2 * h)
            worst_fd = max(worst_fd, abs(fd - s) / max(abs(s), 1e-8))
        add("score_finite_difference", sizes["score_fd_points"], worst_fd, 1e-4,
            worst_fd <= 1e-4)

    if "dsm" in cfg["checks"]:
        data = KdeDataModel(np.array([[0.0]]), bandwidth=0.0)
        schedule = NoiseSchedule.ve_geometric(0.5, 2.0, 4)
        zero = ScoreFunction.zero(1, "ve")
        i = 2
        var = float(schedule.sigmas[i - 1] ** 2)
        loss_zero = dsm_loss(data, schedule, i, zero, sizes["dsm_samples"], seed.derive(6))
        expected = 1.0 / var
        add("dsm_zero_score_loss", i, abs(loss_zero - expected) / expected, 0.02,
            abs(loss_zero - expected) / expected < 0.02)
        mix = KdeDataModel(np.array([[-1.0], [1.0]]), bandwidth=0.1)
        exact = ScoreFunction.from_kde(mix, schedule)
        offset = ScoreFunction(lambda x, j: exact(x, j) + 0.5, dim=1, kind="ve")
        l_exact = dsm_loss(mix, schedule, i, exact, sizes["dsm_samples"], seed.derive(7))
        l_off = dsm_loss(mix, schedule, i, offset, sizes["dsm_samples"], seed.derive(7))
        add("dsm_minimizer_strictness", i, l_off - l_exact, "> 0", l_off > l_exact)

    return rows, extras


def _run_verify(cfg: dict, seed: RunSeed) -> RunRecord:
    rows, extras = _verify_rows(cfg, seed)
    judged = [r for r in rows if r["tolerance"] != ""]
    passed = all(r["passed"] for r in judged)
    fieldnames = ["claim", "parameter", "measured", "tolerance", "passed"]
    summary = {"checks": cfg["checks"], "n_rows": len(rows),
               "n_failed": sum(1 for r in judged if not r["passed"]),
               "all_passed": passed}
    record = RunRecord(config=cfg, metrics=rows, summary=summary, fieldnames=fieldnames)
    record.passed = passed
    record.verify_extras = extras
    return record


# ---------------------------------------------------------------------------
# Artifact writing


def _fmt_cell(v) -> str:
    if isinstance(v, (np.floating, float)):
        return repr(float(v))
    if isinstance(v, (np.integer, int)):
        return str(int(v))
    return str(v)


def _write_metrics(path: Path, fieldnames: list, rows: list) -> None:
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fieldnames)
        for row in rows:
            writer.writerow([_fmt_cell(row.get(name, "")) for name in fieldnames])


def _emit_method_plots(record: RunRecord, run_dir: Path) -> None:
    method = record.config["method"]
    if method == "verify" and "equivalence" in getattr(record, "verify_extras", {}):
        report = record.verify_extras["equivalence"]
        ns = report.sample_counts().astype(float)
        rms = report.rms_errors()
        ref = rms[0] * np.sqrt(ns[0] / ns)
        plots.line_plot(
            [("measured rms error", ns, rms), ("slope -1/2 reference", ns, ref)],
            run_dir / "equivalence_convergence.svg",
            xlabel="samples per update", ylabel="rms error vs quadrature step",
            logx=True, logy=True,
            annotations=[f"fitted slope {plots.fmt6(report.slope)}"])
    if method == "diffuse":
        for sampler, x in record.samples.items():
            if x.shape[1] != 1:
                continue
            data = record.data
            xs = np.linspace(float(x.min()), float(x.max()), 400)[:, None]
            density = None
            if data.bandwidth > 0:
                density = (xs.ravel(), np.exp(kde_log_density(data, xs)))
            plots.histogram_plot(
                x.ravel(), run_dir / f"histogram_{sampler.replace('-', '_')}.svg",
                density=density, xlabel="sample value",
                title=f"{record.config['schedule']['kind']} {sampler}")
            np_samples = x
            with open(run_dir / f"samples_{sampler.replace('-', '_')}.csv", "w",
                      newline="\n") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(["path"] + [f"x{k}" for k in range(np_samples.shape[1])])
                for p, rowv in enumerate(np_samples):
                    writer.writerow([p] + [repr(float(v)) for v in rowv])
    if method == "plan":
        env = record.env
        layout = record.layout
        demo_paths = [layout.states(d)[:, :2] for d in record.demos[:40]]
        shown = next((log for log in record.logs if log.success), record.logs[0])
        planned = (layout.states(shown.last_plan)[:, :2]
                   if shown.last_plan is not None else None)
        plots.trajectory_overlay(
            run_dir / "navigation_overlay.svg", demos=demo_paths, planned=planned,
            executed=shown.states[:, :2],
            obstacle=(env.info["obstacle_center"], env.info["obstacle_radius"]),
            goal=env.info["goal"], goal_radius=record.config["goal_radius"],
            title=f"episode {shown.episode} ({'success' if shown.success else 'failure'})")
    if method == "mppi":
        for name, kind, series, kw in getattr(record, "extra_plots", []):
            plots.emit_plot(series, kind, run_dir / name, **kw)
        overlay = getattr(record, "overlay", None)
        if overlay:
            plots.trajectory_overlay(run_dir / "executed_overlay.svg", **overlay)
    if method == "pg":
        for name, kind, series, kw in getattr(record, "extra_plots", []):
            plots.emit_plot(series, kind, run_dir / name, **kw)


_RUNNERS = {
    "mppi": _run_mppi,
    "pg": _run_pg,
    "diffuse": _run_diffuse,
    "plan": _run_plan,
    "verify": _run_verify,
}


def run_experiment(config_path, seed_override: int | None = None,
                   out_override: str | None = None, method: str | None = None) -> RunRecord:
    """Validate, run, and persist one experiment; returns the full record.

    Artifacts land in <output_dir>/<method>-<utcstamp>-<seed>/: the resolved
    config, metrics.csv, summary.json, and the method's SVG figures.
    """
    raw, text = load_config(config_path)
    try:
        cfg = validate_config(raw, method=method)
    except ConfigError as exc:
        line = _find_key_line(text, exc.path.split(".")[-1]) if exc.path else None
        anchor = f"{config_path}:{line}: " if line else f"{config_path}: "
        raise ConfigError(exc.path, anchor + str(exc)) from None

    resolved = dict(cfg.resolved)
    if seed_override is not None:
        resolved["seed"] = int(seed_override)
    if out_override is not None:
        resolved["output_dir"] = str(out_override)

    start = time.time()
    record = _RUNNERS[cfg.method](resolved, RunSeed(resolved["seed"]))
    wall = time.time() - start

    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    base = Path(resolved["output_dir"])
    base.mkdir(parents=True, exist_ok=True)
    run_dir = base / f"{cfg.method}-{stamp}-{resolved['seed']}"
    k = 1
    while run_dir.exists():
        run_dir = base / f"{cfg.method}-{stamp}-{resolved['seed']}-{k}"
        k += 1
    run_dir.mkdir()

    (run_dir / "config.resolved.json").write_text(
        json.dumps(resolved, indent=2, sort_keys=True) + "\n")
    _write_metrics(run_dir / "metrics.csv", record.fieldnames, record.metrics)
    summary = dict(record.summary)
    summary["method"] = cfg.method
    summary["wall_time_s"] = round(wall, 3)
    summary["passed"] = record.passed
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    _emit_method_plots(record, run_dir)

    record.run_dir = run_dir
    return record


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="gibbs-control",
        description="Trajectory optimization via MPPI, exponential-objective policy "
                    "gradients, and reverse-diffusion sampling, with numerical "
                    "verification of their shared update rule.")
    sub = parser.add_subparsers(dest="command", required=True)
    help_by_method = {
        "mppi": "run a receding-horizon MPPI controller",
        "pg": "run vanilla and exponential-objective policy-gradient estimators",
        "diffuse": "sample a KDE target with VE/VP reverse-diffusion samplers",
        "plan": "guided diffusion planning on the navigation task",
        "verify": "run the closed-form verification suite",
    }
    for name in METHODS:
        p = sub.add_parser(name, help=help_by_method[name])
        p.add_argument("--config", required=True, help="path to the JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the config output directory")

    args = parser.parse_args(argv)
    try:
        record = run_experiment(args.config, seed_override=args.seed,
                                out_override=args.out, method=args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surfaced as a run failure
        print(f"run failed: {exc}", file=sys.stderr)
        return 1

    print(f"run directory: {record.run_dir}")
    if record.passed is None:
        return 0
    print("all checks passed" if record.passed else "SOME CHECKS FAILED", file=sys.stderr)
    return 0 if record.passed else 1


if __name__ == "__main__":
    sys.exit(main())
