"""Open-loop and closed-loop control on top of a trained surrogate.

The policy network is a plain feedforward net whose input concatenates the
current state, the discretized operator applied to it, the target state, the
operator applied to the target, and the scalar time (so a 64-point 1-D grid
gives input width 4*64+1 = 257).  Training rolls the surrogate forward under
policy actions and freshly sampled noise realizations and minimizes

    mean_i [ ||u_roll - u_target||_{L2((0,T]xD)} + alpha*||f||_{L2([0,T]xD)} ]

by backpropagating through the whole rollout with the surrogate parameters
frozen; no environment interaction and no additional data are needed.

Open-loop control instead optimizes the forcing slices directly through the
surrogate (Adam, fixed noise sample set, best-plan tracking).  Closed-loop
deployment queries the policy once per coarse frame against the *real*
environment state and integrates the environment forward; the applied
forcing is recorded so the loop can be audited by replay.
"""

from __future__ import annotations

import contextlib
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .layers import Dense
from .noise import sample_smoothed_noise
from .rng import generator
from .solver import SPDEProblem, advance_frame
from .surrogate import SurrogateModel
from .tensor import Tensor, adam_init, adam_step, concat, no_grad, zero_grads


def _operator_norm_bound(op) -> float:
    """Cheap bound on |lambda|_max of the discretized operator."""
    if op.kind == "tridiagonal":
        return abs(op.diag) + 2.0 * abs(op.off)
    return float(np.abs(op.symbol).max())


class PolicyDivergedError(RuntimeError):
    pass


@dataclass
class PolicyConfig:
    hidden: tuple = (2048, 1024, 1024)   # reference widths for the 64-point grid
    lr: float = 5e-4
    batch_tasks: int = 16
    n_noise: int = 8                     # noise samples per task in the loss
    iterations: int = 200
    alpha: float = 0.01
    seed: int = 0

    def as_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d


class PolicyNet:
    """Operator-encoded feedforward policy: (u_t, L u_t, u_T, L u_T, t) -> f_t."""

    def __init__(self, problem: SPDEProblem, hidden=(2048, 1024, 1024), seed: int = 0):
        self.problem = problem
        self.grid = problem.grid
        self.state_size = int(np.prod(self.grid.space_shape))
        self.in_width = 4 * self.state_size + 1
        # operator channels carry entries ~ |lambda_max| * u; rescale them to
        # state magnitude so the first tanh layer is not saturated
        self.op_scale = 1.0 / max(1.0, _operator_norm_bound(problem.operator))
        gen = generator(seed, 37)
        widths = [self.in_width, *hidden, self.state_size]
        self.layers = [Dense(widths[i], widths[i + 1], gen,
                             zero_init=(i == len(widths) - 2))
                       for i in range(len(widths) - 1)]

    def named_params(self):
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.named_params(f"policy.dense{i}")
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    def encode(self, u_t, u_target, t):
        """Concatenate states with their operator images and the time scalar."""
        u_t = u_t if isinstance(u_t, Tensor) else Tensor(u_t)
        u_target = u_target if isinstance(u_target, Tensor) else Tensor(u_target)
        batch = u_t.shape[0]
        op = self.problem.operator
        parts = [
            u_t.reshape(batch, self.state_size),
            (op.apply(u_t) * self.op_scale).reshape(batch, self.state_size),
            u_target.reshape(batch, self.state_size),
            (op.apply(u_target) * self.op_scale).reshape(batch, self.state_size),
            Tensor(np.full((batch, 1), float(t) / self.grid.T)),
        ]
        return concat(parts, axis=1)

    def act(self, u_t, u_target, t) -> Tensor:
        x = self.encode(u_t, u_target, t)
        for layer in self.layers[:-1]:
            x = layer(x).tanh()
        x = self.layers[-1](x)
        batch = x.shape[0]
        return x.reshape((batch, *self.grid.space_shape))


class ZeroPolicy:
    """Do-nothing baseline with the PolicyNet acting interface."""

    def __init__(self, problem: SPDEProblem):
        self.grid = problem.grid

    def act(self, u_t, u_target, t) -> Tensor:
        batch = u_t.shape[0] if hasattr(u_t, "shape") else 1
        return Tensor(np.zeros((batch, *self.grid.space_shape)))


@contextlib.contextmanager
def frozen(params):
    prev = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, r in zip(params, prev):
            p.requires_grad = r


# keeps the norm differentiable at an exactly-zero argument (e.g. the
# zero-initialized policy's first actions); shifts values by < 1e-12
_NORM_EPS = 1e-24


def _tracking_norms(grid, states, u_target, forcing_slices, alpha):
    """Discrete L2((0,T]) tracking norm and alpha-weighted forcing norm.

    ``states`` lists the K frames (frame 0 excluded from the norm);
    ``forcing_slices`` lists the K-1 control slices.
    """
    space_axes = tuple(range(1, 1 + grid.dim))
    cell = grid.dt_coarse * grid.cell_volume
    track_sq = None
    for u in states[1:]:
        term = ((u - u_target) ** 2).sum(axis=space_axes)
        track_sq = term if track_sq is None else track_sq + term
    energy_sq = None
    for f in forcing_slices:
        term = (f ** 2).sum(axis=space_axes)
        energy_sq = term if energy_sq is None else energy_sq + term
    track = (track_sq * cell + _NORM_EPS).sqrt()
    energy = (energy_sq * cell + _NORM_EPS).sqrt() * alpha
    return track, energy


def _rollout_with_policy(policy, surrogate: SurrogateModel, u0, u_target, xi_scaled):
    grid = surrogate.grid
    fpf = grid.fine_per_frame
    times = grid.frame_times()
    u = u0 if isinstance(u0, Tensor) else Tensor(u0)
    u = grid.pin(u)
    states = [u]
    actions = []
    for k in range(grid.frames - 1):
        f_k = policy.act(u, u_target, times[k])
        xi_k = xi_scaled[:, k * fpf:(k + 1) * fpf]
        u, _, _ = surrogate.predict_step(u, f_k, xi_k, times[k])
        states.append(u)
        actions.append(f_k)
    return states, actions


def _sample_rollout_noise(problem: SPDEProblem, count: int, seed_key) -> np.ndarray:
    """Fresh sigma-scaled smoothed noise realizations, (count, fine_steps, *space)."""
    out = np.empty((count, problem.grid.fine_steps, *problem.grid.space_shape))
    for i in range(count):
        nf = sample_smoothed_noise(problem.grid, seed_key(i),
                                   window=problem.noise_window)
        out[i] = problem.sigma * nf.values
    return out


@dataclass
class PolicyTrainResult:
    losses: list = field(default_factory=list)
    seconds: float = 0.0


def train_policy(policy: PolicyNet, surrogate: SurrogateModel, task_sampler,
                 config: PolicyConfig) -> PolicyTrainResult:
    """Minimize the expected tracking objective through the frozen surrogate.

    ``task_sampler(gen, count)`` returns (u0, u_target) arrays from the data
    distribution; each iteration draws a fresh task batch and fresh noise.
    """
    from .rng import derive_seed

    problem = surrogate.problem
    params = policy.params()
    state = adam_init(params, lr=config.lr)
    result = PolicyTrainResult()
    t0 = time.perf_counter()
    with frozen(surrogate.params()):
        for it in range(config.iterations):
            gen = generator(config.seed, 41, it)
            u0, u_target = task_sampler(gen, config.batch_tasks)
            rep = config.n_noise
            u0r = np.repeat(u0, rep, axis=0)
            utr = np.repeat(u_target, rep, axis=0)
            xi = _sample_rollout_noise(
                problem, u0r.shape[0],
                lambda i: derive_seed(config.seed, 43, it, i))
            ut_tensor = Tensor(utr)
            states, actions = _rollout_with_policy(policy, surrogate,
                                                   u0r, ut_tensor, xi)
            track, energy = _tracking_norms(problem.grid, states, ut_tensor,
                                            actions, config.alpha)
            loss = (track + energy).mean()
            value = loss.item()
            if not np.isfinite(value):
                raise PolicyDivergedError(f"policy loss non-finite at iteration {it}")
            zero_grads(params)
            loss.backward()
            adam_step(params, [p.grad for p in params], state)
            result.losses.append(value)
    result.seconds = time.perf_counter() - t0
    return result


# -- open-loop ------------------------------------------------------------------


@dataclass
class OpenLoopPlan:
    forcing: np.ndarray          # (tasks, frames-1, *space)
    objective: np.ndarray        # best per-task objective
    history: list
    improved: bool
    seconds: float = 0.0


def open_loop_optimize(surrogate: SurrogateModel, u0: np.ndarray,
                       u_target: np.ndarray, n_noise: int, alpha: float,
                       iterations: int = 200, lr=(0.02, 0.05, 0.15),
                       seed: int = 0) -> OpenLoopPlan:
    """Gradient descent on the tracking objective with the forcing free.

    Handles a batch of tasks at once (leading axis); every task optimizes an
    independent forcing block against a fixed per-task noise sample set.
    ``lr`` may be a single step size or a sweep; the best plan per task over
    all iterations and sweep points is returned.
    """
    from .rng import derive_seed

    problem = surrogate.problem
    grid = surrogate.grid
    n_tasks = u0.shape[0]
    u0r = np.repeat(u0, n_noise, axis=0)
    utr = np.repeat(u_target, n_noise, axis=0)
    xi = _sample_rollout_noise(problem, u0r.shape[0],
                               lambda i: derive_seed(seed, 47, i))
    ones_rep = Tensor(np.ones((1, n_noise) + (1,) * grid.dim))
    ut_tensor = Tensor(utr)
    space_axes = tuple(range(1, 1 + grid.dim))
    cell = grid.dt_coarse * grid.cell_volume
    fpf = grid.fine_per_frame
    times = grid.frame_times()

    def objective(f):
        u = Tensor(u0r)
        track_sq = None
        for k in range(grid.frames - 1):
            f_k = f[:, k]
            # tile each task's slice across its noise samples
            f_rep = (f_k.reshape((n_tasks, 1, *grid.space_shape)) * ones_rep) \
                .reshape((n_tasks * n_noise, *grid.space_shape))
            u, _, _ = surrogate.predict_step(u, f_rep, xi[:, k * fpf:(k + 1) * fpf],
                                             times[k])
            term = ((u - ut_tensor) ** 2).sum(axis=space_axes)
            track_sq = term if track_sq is None else track_sq + term
        track = (track_sq * cell + _NORM_EPS).sqrt()           # (tasks*n_noise,)
        energy = ((f ** 2).sum(axis=(1, *[a + 1 for a in space_axes])) * cell
                  + _NORM_EPS).sqrt() * alpha                  # (tasks,)
        return track.reshape(n_tasks, n_noise).mean(axis=1) + energy

    best_obj = np.full(n_tasks, np.inf)
    best_f = np.zeros((n_tasks, grid.frames - 1, *grid.space_shape))
    history = []
    sweep = (lr,) if isinstance(lr, (int, float)) else tuple(lr)
    t0 = time.perf_counter()
    with frozen(surrogate.params()):
        for step_size in sweep:
            f = Tensor(np.zeros((n_tasks, grid.frames - 1, *grid.space_shape)),
                       requires_grad=True)
            state = adam_init([f], lr=step_size)
            for _ in range(iterations):
                per_task = objective(f)
                loss = per_task.mean()
                values = per_task.data
                if not np.all(np.isfinite(values)):
                    raise PolicyDivergedError("open-loop objective became non-finite")
                better = values < best_obj
                if np.any(better):
                    best_obj[better] = values[better]
                    best_f[better] = f.data[better]
                history.append(float(values.mean()))
                zero_grads([f])
                loss.backward()
                adam_step([f], [f.grad], state)
    improved = bool(np.all(np.isfinite(best_obj)))
    return OpenLoopPlan(forcing=best_f, objective=best_obj, history=history,
                        improved=improved, seconds=time.perf_counter() - t0)


# -- closed-loop deployment ------------------------------------------------------


@dataclass
class ControlLoopResult:
    states: np.ndarray            # realized environment trajectory (frames, *space)
    forcing: np.ndarray           # applied control (frames-1, *space)
    policy_seconds: float         # decision time only (excludes the environment)
    frame_log: list               # one JSON-ready record per frame


def _state_hash(u: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(u).tobytes()).hexdigest()[:12]


def run_closed_loop(policy, problem: SPDEProblem, task, noise_seed: int,
                    log_file=None) -> ControlLoopResult:
    """Observe the environment each coarse frame, act, integrate one interval.

    Replaying the recorded forcing through ``solver.simulate`` with the same
    noise seed reproduces the returned trajectory bit-exactly.
    """
    grid = problem.grid
    fpf = grid.fine_per_frame
    times = grid.frame_times()
    nf = sample_smoothed_noise(grid, noise_seed, window=problem.noise_window)
    u_target = np.asarray(task.u_target)
    u = np.array(grid.pin(np.asarray(task.u0, dtype=np.float64)))
    states = np.empty((grid.frames, *grid.space_shape))
    states[0] = u
    forcing = np.empty((grid.frames - 1, *grid.space_shape))
    frame_log = []
    policy_seconds = 0.0
    for k in range(grid.frames - 1):
        t_dec = time.perf_counter()
        with no_grad():
            f_k = policy.act(u[None], u_target[None], times[k]).data[0]
        policy_seconds += time.perf_counter() - t_dec
        forcing[k] = f_k
        u = advance_frame(problem, u, f_k, nf.values[k * fpf:(k + 1) * fpf], k)
        states[k + 1] = u
        err = np.sqrt(((u - u_target) ** 2).sum() * grid.cell_volume)
        frame_log.append({
            "frame": k + 1,
            "t": float(times[k + 1]),
            "state_hash": _state_hash(u),
            "action_norm": float(np.sqrt((f_k ** 2).sum() * grid.cell_volume)),
            "tracking_error": float(err),
        })
    if log_file is not None:
        for record in frame_log:
            log_file.write(json.dumps(record) + "\n")
    return ControlLoopResult(states=states, forcing=forcing,
                             policy_seconds=policy_seconds, frame_log=frame_log)
