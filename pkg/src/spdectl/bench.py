"""Tracking tasks, metrics, and the benchmark/ablation runners.

A tracking task bundles an initial state, a fixed target field sampled from
the empirical distribution of last-frame states (with a small jitter), the
energy weight alpha, the per-task noise sample count used by the optimizers,
and the environment noise scale.  Scoring uses the discrete space-time norms

    e_track  = || u - u* ||_{L2((0,T] x D)}        (initial frame excluded)
    e_energy = alpha * || f ||_{L2([0,T] x D)}
    e        = e_track + e_energy

evaluated on the realized environment trajectory, averaged over tasks.

The benchmark runner compares control methods per surrogate model: open-loop
(forcing optimized through the model, then applied blind) and the policy net
(closed loop against the live environment), plus a zero-control baseline.
Open-loop timing counts the full optimization; policy timing counts only the
per-frame decision passes.  Metric tables exclude wall-clock so their CSV
bytes are seed-reproducible; timings go to a separate table.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from .control import PolicyNet, ZeroPolicy, open_loop_optimize, run_closed_loop
from .regfeat import time_features
from .rng import derive_seed, generator
from .solver import Dataset, SPDEProblem, SamplerConfig, sample_state, simulate
from .surrogate import SurrogateModel


@dataclass(frozen=True)
class TrackingTask:
    u0: np.ndarray
    u_target: np.ndarray
    alpha: float
    n_noise: int
    sigma: float
    env_seed: int


@dataclass
class MetricsEntry:
    e_track: float
    e_energy: float

    @property
    def e(self) -> float:
        return self.e_track + self.e_energy


@dataclass
class MetricsReport:
    entries: list = field(default_factory=list)

    @property
    def e_track(self) -> float:
        return float(np.mean([x.e_track for x in self.entries]))

    @property
    def e_energy(self) -> float:
        return float(np.mean([x.e_energy for x in self.entries]))

    @property
    def e(self) -> float:
        return float(np.mean([x.e for x in self.entries]))


def make_tasks(dataset: Dataset, count: int = 50, seed: int = 0,
               alpha: float = 0.01, n_noise: int = 50, sigma: float = None,
               jitter: float = 0.05) -> list:
    """Tasks with fresh initial states and empirically-resampled targets."""
    if not dataset.trajectories:
        raise ValueError("dataset is empty")
    problem = dataset.problem
    sampler = dataset.sampler or SamplerConfig()
    sigma = problem.sigma if sigma is None else sigma
    last_frames = np.stack([tr.states[-1] for tr in dataset.trajectories])
    tasks = []
    for i in range(count):
        gen = generator(seed, 61, i)
        u0 = sample_state(problem.grid, gen, sampler.k_max, sampler.ic_amp)
        pick = int(gen.integers(len(dataset)))
        u_target = last_frames[pick] + jitter * gen.standard_normal(
            problem.grid.space_shape)
        u_target = np.array(problem.grid.pin(u_target))
        tasks.append(TrackingTask(
            u0=u0, u_target=u_target, alpha=alpha, n_noise=n_noise, sigma=sigma,
            env_seed=derive_seed(seed, 67, i)))
    return tasks


def task_sampler_from_dataset(dataset: Dataset, jitter: float = 0.05):
    """(u0, u_target) batch sampler sharing the task distribution; for policy
    training, which needs fresh pairs every iteration."""
    problem = dataset.problem
    sampler = dataset.sampler or SamplerConfig()
    last_frames = np.stack([tr.states[-1] for tr in dataset.trajectories])

    def draw(gen, count):
        u0 = np.stack([sample_state(problem.grid, gen, sampler.k_max, sampler.ic_amp)
                       for _ in range(count)])
        picks = gen.integers(len(dataset), size=count)
        targets = last_frames[picks] + jitter * gen.standard_normal(
            (count, *problem.grid.space_shape))
        targets = np.stack([np.array(problem.grid.pin(t)) for t in targets])
        return u0, targets

    return draw


def score(states: np.ndarray, forcing: np.ndarray, task: TrackingTask,
          problem: SPDEProblem) -> MetricsEntry:
    grid = problem.grid
    cell = grid.dt_coarse * grid.cell_volume
    e_track = float(np.sqrt(((states[1:] - task.u_target) ** 2).sum() * cell))
    e_energy = float(task.alpha * np.sqrt((forcing ** 2).sum() * cell))
    return MetricsEntry(e_track=e_track, e_energy=e_energy)


def _env_problem(problem: SPDEProblem, task: TrackingTask) -> SPDEProblem:
    if task.sigma == problem.sigma:
        return problem
    return dataclasses.replace(problem, sigma=task.sigma)


@dataclass
class BenchEntry:
    name: str
    surrogate: SurrogateModel
    policy: PolicyNet = None


@dataclass
class BenchRow:
    model: str
    method: str
    report: MetricsReport
    mean_seconds: float = 0.0
    feature_seconds: float = 0.0


def evaluate_zero_control(problem: SPDEProblem, tasks) -> BenchRow:
    policy = ZeroPolicy(problem)
    report = MetricsReport()
    for task in tasks:
        env = _env_problem(problem, task)
        result = run_closed_loop(policy, env, task, task.env_seed)
        report.entries.append(score(result.states, result.forcing, task, env))
    return BenchRow(model="-", method="zero", report=report)


def evaluate_policy(entry: BenchEntry, problem: SPDEProblem, tasks) -> BenchRow:
    report = MetricsReport()
    seconds = 0.0
    for task in tasks:
        env = _env_problem(problem, task)
        result = run_closed_loop(entry.policy, env, task, task.env_seed)
        report.entries.append(score(result.states, result.forcing, task, env))
        seconds += result.policy_seconds
    return BenchRow(model=entry.name, method="policy", report=report,
                    mean_seconds=seconds / len(tasks))


def evaluate_open_loop(entry: BenchEntry, problem: SPDEProblem, tasks,
                       iterations: int = 150, lr=(0.02, 0.05, 0.15),
                       seed: int = 0) -> BenchRow:
    """Optimize all task plans through the surrogate (batched), apply blind."""
    sigma = tasks[0].sigma
    if any(t.sigma != sigma for t in tasks):
        raise ValueError("open-loop batch expects a uniform task noise scale")
    # plans are optimized against noise sampled at the task scale
    surrogate = entry.surrogate
    plan_problem = _env_problem(surrogate.problem, tasks[0])
    plan_surrogate = surrogate
    if plan_problem is not surrogate.problem:
        plan_surrogate = _with_problem(surrogate, plan_problem)
    u0 = np.stack([t.u0 for t in tasks])
    u_target = np.stack([t.u_target for t in tasks])
    with time_features() as feat_timer:
        plan = open_loop_optimize(plan_surrogate, u0, u_target,
                                  n_noise=tasks[0].n_noise, alpha=tasks[0].alpha,
                                  iterations=iterations, lr=lr, seed=seed)
    report = MetricsReport()
    for i, task in enumerate(tasks):
        env = _env_problem(problem, task)
        traj = simulate(env, task.u0, plan.forcing[i], seed=task.env_seed)
        report.entries.append(score(traj.states, traj.forcing, task, env))
    return BenchRow(model=entry.name, method="open-loop", report=report,
                    mean_seconds=plan.seconds / len(tasks),
                    feature_seconds=feat_timer["seconds"] / len(tasks))


def _with_problem(surrogate: SurrogateModel, problem: SPDEProblem) -> SurrogateModel:
    """Same weights, different environment sigma (robustness ablations)."""
    clone = SurrogateModel(problem, surrogate.config)
    for (_, dst), (_, src) in zip(clone.named_params(), surrogate.named_params()):
        dst.data = src.data
    return clone


def run_benchmark(entries, problem: SPDEProblem, tasks, include_zero: bool = True,
                  open_loop_iterations: int = 150,
                  open_loop_lr=(0.02, 0.05, 0.15), seed: int = 0) -> list:
    rows = []
    if include_zero:
        rows.append(evaluate_zero_control(problem, tasks))
    for entry in entries:
        rows.append(evaluate_open_loop(entry, problem, tasks,
                                       iterations=open_loop_iterations,
                                       lr=open_loop_lr, seed=seed))
        if entry.policy is not None:
            rows.append(evaluate_policy(entry, problem, tasks))
    return rows


def control_noise_ablation(entries, dataset: Dataset, sigmas, count: int = 50,
                           seed: int = 0, alpha: float = 0.01, n_noise: int = 50,
                           open_loop_iterations: int = 150,
                           open_loop_lr=(0.02, 0.05, 0.15)) -> list:
    """Evaluate fixed (base-sigma-trained) models at several noise scales."""
    rows = []
    for j, sigma in enumerate(sigmas):
        tasks = make_tasks(dataset, count=count, seed=derive_seed(seed, 71, j),
                           alpha=alpha, n_noise=n_noise, sigma=sigma)
        for row in run_benchmark(entries, dataset.problem, tasks,
                                 include_zero=False,
                                 open_loop_iterations=open_loop_iterations,
                                 open_loop_lr=open_loop_lr, seed=seed):
            rows.append((sigma, row))
    return rows


# -- table / CSV output -----------------------------------------------------------


METRIC_COLUMNS = ("model", "method", "e", "e_track", "e_energy")


def metric_records(rows) -> list:
    out = []
    for row in rows:
        out.append({
            "model": row.model, "method": row.method,
            "e": row.report.e, "e_track": row.report.e_track,
            "e_energy": row.report.e_energy,
        })
    return out


def timing_records(rows) -> list:
    return [{"model": r.model, "method": r.method,
             "mean_seconds": r.mean_seconds,
             "feature_seconds": r.feature_seconds} for r in rows]


def write_csv(path, records, columns):
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for rec in records:
            cells = [_format_cell(rec[c]) for c in columns]
            fh.write(",".join(cells) + "\n")


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def format_table(records, columns) -> str:
    rows = [[_format_cell(rec[c]) for c in columns] for rec in records]
    widths = [max(len(col), *(len(r[i]) for r in rows)) if rows else len(col)
              for i, col in enumerate(columns)]
    lines = ["  ".join(col.ljust(w) for col, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)))
    return "\n".join(lines)
