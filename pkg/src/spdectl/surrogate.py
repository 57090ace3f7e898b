"""Autoregressive forward models: feature head plus backbone residual network.

A surrogate predicts one coarse-frame transition at a time.  The feature
variants evaluate the regularity features over the coarse interval (initial
feature seeded with the current state) and predict

    u_next = theta1 . s_out + W(s_out, coords, t)[0]

where the learned linear head ``theta1`` weighs the feature stack and the
backbone W models the truncation residual.  The plain variants see the raw
state, forcing, the interval's scaled noise slices and coordinates, and
predict a residual on top of the current state.  Both variants carry two
reconstruction heads (current state and forcing) trained alongside the
transition, mirroring how they are scored.

Training extracts all single-step pairs from a trajectory dataset.  For the
feature variants the feature stacks do not depend on the parameters, so they
are precomputed once (in fixed-size chunks, optionally thread-parallel, with
bit-identical results either way).  After a warmup period, samples whose
loss exceeds a quantile of the per-sample loss distribution are duplicated,
shifting the training distribution toward the difficult pairs.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .grid import PERIODIC, Grid
from .layers import Conv1d, Conv2d, SpectralConv1d, SpectralConv2d
from .regfeat import FeatureSpec, S_IN, enumerate_terms, evaluate
from .rng import generator
from .solver import Dataset, SPDEProblem
from .tensor import Tensor, adam_init, adam_step, concat, no_grad, \
    zero_grads

CONV = "conv"
SPECTRAL = "spectral"
NONE = "none"

_PRECOMPUTE_CHUNK = 512     # fixed so chunked evaluation is deterministic


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 60
    seed: int = 0
    warmup_frac: float = 0.2
    difficulty_q: float = 0.8
    dup_factor: int = 1
    w_transition: float = 1.0
    w_recon: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.difficulty_q < 1.0:
            raise ValueError("difficulty quantile must lie in (0, 1)")
        if self.dup_factor < 0:
            raise ValueError("duplication factor must be >= 0")


class ConvBackbone:
    """Stacked odd-kernel convolutions with tanh between (any spatial dim)."""

    def __init__(self, dim, c_in, c_out, channels, layers, gen, padding, kernel=3):
        conv = Conv1d if dim == 1 else Conv2d
        widths = [c_in] + [channels] * (layers - 1) + [c_out]
        self.layers = [conv(widths[i], widths[i + 1], kernel, gen, padding=padding)
                       for i in range(layers)]

    def __call__(self, x: Tensor) -> Tensor:
        for layer in self.layers[:-1]:
            x = layer(x).tanh()
        return self.layers[-1](x)

    def named_params(self, prefix: str):
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.named_params(f"{prefix}.conv{i}")
        return out


class SpectralBackbone:
    """Lift, spectral mixing layers with pointwise skips, project."""

    def __init__(self, dim, c_in, c_out, channels, layers, modes, gen, padding):
        conv = Conv1d if dim == 1 else Conv2d
        spect = SpectralConv1d if dim == 1 else SpectralConv2d
        self.lift = conv(c_in, channels, 1, gen, padding=padding)
        self.spectral = [spect(channels, channels, modes, gen) for _ in range(layers)]
        self.mix = [conv(channels, channels, 1, gen, padding=padding)
                    for _ in range(layers)]
        self.proj = conv(channels, c_out, 1, gen, padding=padding)

    def __call__(self, x: Tensor) -> Tensor:
        x = self.lift(x)
        for spec_layer, mix in zip(self.spectral, self.mix):
            x = (spec_layer(x) + mix(x)).tanh()
        return self.proj(x)

    def named_params(self, prefix: str):
        out = self.lift.named_params(f"{prefix}.lift")
        for i, (s, m) in enumerate(zip(self.spectral, self.mix)):
            out += s.named_params(f"{prefix}.spec{i}")
            out += m.named_params(f"{prefix}.mix{i}")
        return out + self.proj.named_params(f"{prefix}.proj")


@dataclass
class SurrogateConfig:
    backbone: str = CONV            # "conv", "spectral" or "none"
    use_features: bool = True
    channels: int = 32
    layers: int = 3
    modes: int = 12                 # spectral backbone, per axis in 2-D
    feature_n: int = 1
    feature_m: int = 2
    feature_l: int = 2
    seed: int = 0

    def name(self) -> str:
        base = {CONV: "conv", SPECTRAL: "spectral", NONE: "linear"}[self.backbone]
        return f"rf-{base}" if self.use_features else base

    def as_dict(self) -> dict:
        return dict(self.__dict__)


class SurrogateModel:
    """One-step transition model with reconstruction heads (Fig-style base model)."""

    N_HEADS = 3     # next state, current-state reconstruction, forcing reconstruction

    def __init__(self, problem: SPDEProblem, config: SurrogateConfig):
        self.problem = problem
        self.grid: Grid = problem.grid
        self.config = config
        gen = generator(config.seed, 11)
        dim = self.grid.dim
        padding = "periodic" if self.grid.bc == PERIODIC else "zero"
        n_coord = dim + 1               # space coordinate channels plus time

        if config.use_features:
            mode = "split" if problem.noise_kind == "multiplicative" else "combined"
            self.feature_spec = FeatureSpec(
                n=config.feature_n, m=config.feature_m, l=config.feature_l,
                forcing_mode=mode, dim=dim)
            self.terms = enumerate_terms(self.feature_spec)
            theta = np.zeros(len(self.terms))
            theta[self.terms.index(S_IN)] = 1.0     # start from pure propagation
            self.theta1 = Tensor(theta, requires_grad=True)
            c_in = len(self.terms) + n_coord
        else:
            self.feature_spec = None
            self.terms = []
            self.theta1 = None
            c_in = 2 + self.grid.fine_per_frame + n_coord   # u, f, noise slices

        if config.backbone == NONE:
            self.backbone = None
        elif config.backbone == CONV:
            self.backbone = ConvBackbone(dim, c_in, self.N_HEADS, config.channels,
                                         config.layers, gen, padding)
        elif config.backbone == SPECTRAL:
            modes = config.modes if dim == 1 else (config.modes, config.modes)
            self.backbone = SpectralBackbone(dim, c_in, self.N_HEADS, config.channels,
                                             config.layers, modes, gen, padding)
        else:
            raise ValueError(f"unknown backbone {config.backbone!r}")

        self._coords = Tensor(self._coord_channels())

    def _coord_channels(self) -> np.ndarray:
        if self.grid.dim == 1:
            return self.grid.coords()[None, None, :]
        xx, yy = self.grid.coords()
        return np.stack([xx, yy])[None]

    def named_params(self):
        out = []
        if self.theta1 is not None:
            out.append(("theta1", self.theta1))
        if self.backbone is not None:
            out += self.backbone.named_params("backbone")
        return out

    def params(self):
        return [p for _, p in self.named_params()]

    # -- forward -----------------------------------------------------------

    def features(self, u_t, f_t, xi_scaled) -> "Tensor":
        """Feature stack over one coarse interval, s_in seeded with u_t.

        ``xi_scaled`` holds the interval's sigma-scaled smoothed noise slices,
        shape (B, fine_per_frame, *space).
        """
        fpf = self.grid.fine_per_frame
        if self.feature_spec.forcing_mode == "combined":
            leaves = {"ftilde": [f_t + _slice_step(xi_scaled, j) for j in range(fpf)]}
        else:
            leaves = {"f": [f_t] * fpf,
                      "xi": [_slice_step(xi_scaled, j) for j in range(fpf)]}
        fs = evaluate(self.feature_spec, u_t, leaves, self.problem.propagator,
                      self.grid, fpf, sample_steps=[fpf])
        return fs.stacked(0)

    def _time_channel(self, t, batch: int):
        arr = np.asarray(t, dtype=np.float64) / self.grid.T
        if arr.ndim == 0:
            arr = np.full(batch, float(arr))
        full = np.broadcast_to(arr.reshape((batch,) + (1,) * (self.grid.dim + 1)),
                               (batch, 1) + self.grid.space_shape)
        return Tensor(np.ascontiguousarray(full))

    def heads_from_features(self, s_out, t):
        """Eq-style decomposition: linear head plus backbone on (s_out, coords)."""
        s_out = s_out if isinstance(s_out, Tensor) else Tensor(s_out)
        batch = s_out.shape[0]
        theta_shape = (1, len(self.terms)) + (1,) * self.grid.dim
        linear = (s_out * self.theta1.reshape(theta_shape)).sum(axis=1)
        if self.backbone is None:
            zero = Tensor(np.zeros_like(linear.data))
            return self.grid.pin(linear), zero, zero
        inp = concat([s_out, _tile(self._coords, batch), self._time_channel(t, batch)],
                     axis=1)
        out = self.backbone(inp)
        u_next = self.grid.pin(linear + out[:, 0])
        return u_next, self.grid.pin(out[:, 1]), out[:, 2]

    def heads_plain(self, u_t, f_t, xi_scaled, t):
        u_t = u_t if isinstance(u_t, Tensor) else Tensor(u_t)
        f_t = f_t if isinstance(f_t, Tensor) else Tensor(f_t)
        xi = xi_scaled if isinstance(xi_scaled, Tensor) else Tensor(xi_scaled)
        batch = u_t.shape[0]
        new_ax = (slice(None), None)
        inp = concat([u_t[new_ax], f_t[new_ax], xi,
                      _tile(self._coords, batch), self._time_channel(t, batch)], axis=1)
        out = self.backbone(inp)
        u_next = self.grid.pin(u_t + out[:, 0])
        return u_next, self.grid.pin(out[:, 1]), out[:, 2]

    def predict_step(self, u_t, f_t, xi_scaled, t):
        """One transition: returns (u_next, u_t reconstruction, f_t reconstruction)."""
        if self.config.use_features:
            s_out = self.features(u_t, f_t, xi_scaled)
            return self.heads_from_features(s_out, t)
        return self.heads_plain(u_t, f_t, xi_scaled, t)

    def rollout(self, u0, forcing, xi_scaled):
        """Iterated predict_step from frame 0; returns the list of K frames.

        ``forcing``: (B, frames-1, *space); ``xi_scaled``: (B, fine_steps, *space).
        Differentiable when inputs are Tensors.
        """
        grid = self.grid
        fpf = grid.fine_per_frame
        times = grid.frame_times()
        u = u0 if isinstance(u0, Tensor) else Tensor(u0)
        u = grid.pin(u)
        states = [u]
        for k in range(grid.frames - 1):
            f_k = _slice_step(forcing, k)
            xi_k = _slice_block(xi_scaled, k * fpf, (k + 1) * fpf)
            u, _, _ = self.predict_step(u, f_k, xi_k, times[k])
            states.append(u)
        return states


def _slice_step(arr, j):
    """arr[:, j] for Tensor or ndarray."""
    if isinstance(arr, Tensor):
        return arr[:, j]
    return arr[:, j]


def _slice_block(arr, lo, hi):
    if isinstance(arr, Tensor):
        return arr[:, lo:hi]
    return arr[:, lo:hi]


def _tile(coords: Tensor, batch: int) -> Tensor:
    return coords * Tensor(np.ones((batch,) + (1,) * (coords.ndim - 1)))


# -- training -------------------------------------------------------------------


@dataclass
class StepSamples:
    """All single-step pairs of a dataset, flattened."""

    u_t: np.ndarray          # (S, *space)
    f_t: np.ndarray
    xi_scaled: np.ndarray    # (S, fine_per_frame, *space)
    u_next: np.ndarray
    t: np.ndarray            # (S,) frame start times
    traj_index: np.ndarray
    features: np.ndarray = None    # (S, N_S, *space) when precomputed

    def __len__(self):
        return self.u_t.shape[0]


def extract_pairs(dataset: Dataset) -> StepSamples:
    grid = dataset.problem.grid
    sigma = dataset.problem.sigma
    fpf = grid.fine_per_frame
    times = grid.frame_times()
    u_t, f_t, xi, u_next, ts, traj = [], [], [], [], [], []
    for i, tr in enumerate(dataset.trajectories):
        for k in range(grid.frames - 1):
            u_t.append(tr.states[k])
            f_t.append(tr.forcing[k])
            xi.append(sigma * tr.noise[k * fpf:(k + 1) * fpf])
            u_next.append(tr.states[k + 1])
            ts.append(times[k])
            traj.append(i)
    return StepSamples(np.stack(u_t), np.stack(f_t), np.stack(xi),
                       np.stack(u_next), np.array(ts), np.array(traj))


def precompute_features(model: SurrogateModel, samples: StepSamples,
                        threads: int = 1) -> np.ndarray:
    """Feature stacks for every sample (ndarray path, fixed-chunk order)."""
    chunks = [(lo, min(lo + _PRECOMPUTE_CHUNK, len(samples)))
              for lo in range(0, len(samples), _PRECOMPUTE_CHUNK)]

    def run(bounds):
        lo, hi = bounds
        return model.features(samples.u_t[lo:hi], samples.f_t[lo:hi],
                              samples.xi_scaled[lo:hi])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(b) for b in chunks]
    return np.concatenate(parts, axis=0)


def _features_maybe_cached(model, dataset, samples, threads, cache_path):
    """Precomputed feature stacks, read from/written to the cache when given.

    The cache is keyed by (feature-spec hash, dataset hash); a key mismatch
    falls through to recomputation and overwrites the file.
    """
    if cache_path is None:
        return precompute_features(model, samples, threads=threads)
    import os

    from . import storage
    spec_hash = model.feature_spec.spec_hash()
    if os.path.exists(cache_path):
        cached = storage.load_features(cache_path, spec_hash, dataset.config_hash)
        if cached is not None and cached.shape[0] == len(samples):
            return cached
    features = precompute_features(model, samples, threads=threads)
    storage.save_features(cache_path, spec_hash, dataset.config_hash, features)
    return features


def _batch_heads(model: SurrogateModel, samples: StepSamples, idx: np.ndarray):
    t = samples.t[idx]
    if model.config.use_features:
        return model.heads_from_features(Tensor(samples.features[idx]), t)
    return model.heads_plain(samples.u_t[idx], samples.f_t[idx],
                             samples.xi_scaled[idx], t)


def _component_losses(model, samples, idx, pred):
    u_next, u_rec, f_rec = pred
    space_axes = tuple(range(1, 1 + model.grid.dim))
    d_tr = ((u_next - Tensor(samples.u_next[idx])) ** 2).mean(axis=space_axes)
    d_ur = ((u_rec - Tensor(samples.u_t[idx])) ** 2).mean(axis=space_axes)
    d_fr = ((f_rec - Tensor(samples.f_t[idx])) ** 2).mean(axis=space_axes)
    return d_tr, d_ur, d_fr


def _weighted_loss(config: TrainConfig, d_tr, d_ur, d_fr):
    return (d_tr * config.w_transition + (d_ur + d_fr) * config.w_recon).mean()


def per_sample_losses(model: SurrogateModel, samples: StepSamples,
                      config: TrainConfig) -> np.ndarray:
    """Per-sample weighted loss over the whole sample set (no gradients)."""
    out = np.empty(len(samples))
    with no_grad():
        for lo in range(0, len(samples), _PRECOMPUTE_CHUNK):
            idx = np.arange(lo, min(lo + _PRECOMPUTE_CHUNK, len(samples)))
            d_tr, d_ur, d_fr = _component_losses(
                model, samples, idx, _batch_heads(model, samples, idx))
            out[idx] = (d_tr * config.w_transition
                        + (d_ur + d_fr) * config.w_recon).data
    return out


@dataclass
class TrainResult:
    epoch_losses: list = field(default_factory=list)
    augmented_count: int = 0
    feature_seconds: float = 0.0
    train_seconds: float = 0.0


def train(model: SurrogateModel, dataset: Dataset, config: TrainConfig,
          threads: int = 1, feature_cache: str = None) -> TrainResult:
    result = TrainResult()
    samples = extract_pairs(dataset)
    if model.config.use_features:
        t0 = time.perf_counter()
        samples.features = _features_maybe_cached(model, dataset, samples,
                                                  threads, feature_cache)
        result.feature_seconds = time.perf_counter() - t0

    params = model.params()
    state = adam_init(params, lr=config.lr)
    gen = generator(config.seed, 23)
    pool = np.arange(len(samples))
    warmup_epochs = int(np.ceil(config.warmup_frac * config.epochs))

    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        if epoch == warmup_epochs and config.dup_factor > 0:
            losses = per_sample_losses(model, samples, config)
            threshold = np.quantile(losses, config.difficulty_q)
            hard = np.nonzero(losses > threshold)[0]
            pool = np.concatenate([pool] + [hard] * config.dup_factor)
            result.augmented_count = len(hard) * config.dup_factor
        perm = gen.permutation(pool)
        epoch_loss = 0.0
        n_batches = 0
        for lo in range(0, len(perm), config.batch_size):
            idx = perm[lo:lo + config.batch_size]
            loss = _weighted_loss(config, *_component_losses(
                model, samples, idx, _batch_heads(model, samples, idx)))
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch}")
            zero_grads(params)
            loss.backward()
            adam_step(params, [p.grad for p in params], state)
            epoch_loss += value
            n_batches += 1
        result.epoch_losses.append(epoch_loss / n_batches)
    result.train_seconds = time.perf_counter() - t0
    return result


# -- evaluation -----------------------------------------------------------------


@dataclass
class ModelReport:
    """Relative L2 error components, Table-style: f/u0/u1 reconstruction + rollout."""

    f_recon: float
    u0_recon: float
    u1_onestep: float
    prediction: float

    @property
    def total(self) -> float:
        return self.f_recon + self.u0_recon + self.u1_onestep + self.prediction

    def row(self) -> str:
        return (f"{self.total:.4f} = {self.f_recon:.4f} + {self.u0_recon:.4f} "
                f"+ {self.u1_onestep:.4f} + {self.prediction:.4f}")


def _rel_l2(pred: np.ndarray, true: np.ndarray, axes) -> np.ndarray:
    num = np.sqrt(((pred - true) ** 2).sum(axis=axes))
    den = np.sqrt((true ** 2).sum(axis=axes))
    return num / np.maximum(den, 1e-300)


def evaluate_model(model: SurrogateModel, dataset: Dataset,
                   threads: int = 1) -> ModelReport:
    samples = extract_pairs(dataset)
    if model.config.use_features:
        samples.features = precompute_features(model, samples, threads=threads)
    space_axes = tuple(range(1, 1 + model.grid.dim))
    f_err, u0_err, u1_err = [], [], []
    with no_grad():
        for lo in range(0, len(samples), _PRECOMPUTE_CHUNK):
            idx = np.arange(lo, min(lo + _PRECOMPUTE_CHUNK, len(samples)))
            u_next, u_rec, f_rec = _batch_heads(model, samples, idx)
            f_err.append(_rel_l2(f_rec.data, samples.f_t[idx], space_axes))
            u0_err.append(_rel_l2(u_rec.data, samples.u_t[idx], space_axes))
            u1_err.append(_rel_l2(u_next.data, samples.u_next[idx], space_axes))
        # autoregressive rollout over whole trajectories; the noise scale is
        # the evaluation dataset's (may differ from the training sigma)
        sigma = dataset.problem.sigma
        u0 = np.stack([tr.states[0] for tr in dataset.trajectories])
        forcing = np.stack([tr.forcing for tr in dataset.trajectories])
        xi = sigma * np.stack([tr.noise for tr in dataset.trajectories])
        true = np.stack([tr.states for tr in dataset.trajectories])
        pred_frames = []
        for lo in range(0, u0.shape[0], _PRECOMPUTE_CHUNK):
            hi = min(lo + _PRECOMPUTE_CHUNK, u0.shape[0])
            states = model.rollout(u0[lo:hi], forcing[lo:hi], xi[lo:hi])
            pred_frames.append(np.stack([s.data for s in states], axis=1))
        pred = np.concatenate(pred_frames, axis=0)
        flat_axes = tuple(range(1, 2 + model.grid.dim))
        roll = _rel_l2(pred[:, 1:], true[:, 1:], flat_axes)
    return ModelReport(
        f_recon=float(np.mean(np.concatenate(f_err))),
        u0_recon=float(np.mean(np.concatenate(u0_err))),
        u1_onestep=float(np.mean(np.concatenate(u1_err))),
        prediction=float(np.mean(roll)),
    )
