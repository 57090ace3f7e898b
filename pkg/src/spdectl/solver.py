"""Reference numerical solvers: the "environment" the controllers act on.

Two stochastic problems are supported.  The 1-D reaction-diffusion equation

    du/dt - nu*Lap(u) = 3u - u^3 + f + sigma*u*xi        (Dirichlet u=0)

is integrated semi-implicitly: the nonlinearity, forcing and noise explicit,
the diffusion through the factorized resolvent, boundary re-pinned to zero
after every step.  The 2-D Navier-Stokes equation in vorticity form

    dw/dt - nu*Lap(w) = -u.grad(w) + f + sigma*xi        (periodic)

uses a pseudo-spectral step: velocity recovered from the vorticity through
the streamfunction, advection formed in physical space with 2/3-rule
dealiasing, diffusion implicit per Fourier mode.

Trajectories are recorded on the coarse frame grid; the forcing is
piecewise-constant over coarse intervals (one control slice per interval).
Dataset generation is pure per trajectory given derived seeds, so serial
and thread-parallel generation produce identical datasets.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .grid import DIRICHLET, PERIODIC, DiscreteOperator, Grid, Propagator, \
    laplacian_1d, laplacian_2d_spectral
from .noise import sample_smoothed_noise
from .rng import derive_seed, generator
from .util import config_hash

RD = "reaction-diffusion"
NS = "navier-stokes"


class SolverBlowUpError(FloatingPointError):
    """State left the finite range during integration."""


@dataclass(frozen=True)
class SPDEProblem:
    kind: str
    grid: Grid
    nu: float
    sigma: float
    mu_kind: str = "cubic"          # "cubic" (3u - u^3) or "none"
    noise_kind: str = "multiplicative"   # "multiplicative", "additive", "none"
    noise_window: int = 3

    def __post_init__(self):
        if self.kind not in (RD, NS):
            raise ValueError(f"unknown problem kind {self.kind!r}")
        if self.kind == RD and self.grid.bc != DIRICHLET:
            raise ValueError("reaction-diffusion runs on a Dirichlet grid")
        if self.kind == NS and self.grid.bc != PERIODIC:
            raise ValueError("navier-stokes runs on a periodic grid")

    @cached_property
    def operator(self) -> DiscreteOperator:
        """L^dis = nu * Lap^dis."""
        if self.kind == RD:
            return laplacian_1d(self.grid.n, self.grid.eps).scaled(self.nu)
        return laplacian_2d_spectral(self.grid.n).scaled(self.nu)

    @cached_property
    def propagator(self) -> Propagator:
        return Propagator(self.operator, self.grid.dt_fine)

    def descriptor(self) -> dict:
        g = self.grid
        return {
            "kind": self.kind,
            "nu": self.nu,
            "sigma": self.sigma,
            "mu_kind": self.mu_kind,
            "noise_kind": self.noise_kind,
            "noise_window": self.noise_window,
            "grid": {
                "dim": g.dim, "n": g.n, "length": g.length, "bc": g.bc,
                "frames": g.frames, "fine_per_frame": g.fine_per_frame, "T": g.T,
            },
        }


def problem_from_descriptor(desc: dict) -> SPDEProblem:
    g = desc["grid"]
    grid = Grid(dim=g["dim"], n=g["n"], length=g["length"], bc=g["bc"],
                frames=g["frames"], fine_per_frame=g["fine_per_frame"], T=g["T"])
    return SPDEProblem(kind=desc["kind"], grid=grid, nu=desc["nu"],
                       sigma=desc["sigma"], mu_kind=desc["mu_kind"],
                       noise_kind=desc["noise_kind"],
                       noise_window=desc["noise_window"])


def rd_problem(n: int = 64, frames: int = 11, fine_per_frame: int = 20,
               nu: float = 0.1, sigma: float = 0.05, **kw) -> SPDEProblem:
    grid = Grid(dim=1, n=n, bc=DIRICHLET, frames=frames, fine_per_frame=fine_per_frame)
    return SPDEProblem(kind=RD, grid=grid, nu=nu, sigma=sigma, **kw)


def ns_problem(n: int = 40, frames: int = 11, fine_per_frame: int = 20,
               nu: float = 0.02, sigma: float = 1e-5, **kw) -> SPDEProblem:
    grid = Grid(dim=2, n=n, bc=PERIODIC, frames=frames, fine_per_frame=fine_per_frame)
    kw.setdefault("mu_kind", "advection")
    kw.setdefault("noise_kind", "additive")
    return SPDEProblem(kind=NS, grid=grid, nu=nu, sigma=sigma, **kw)


@dataclass
class Trajectory:
    states: np.ndarray        # (frames, *space)
    forcing: np.ndarray       # (frames-1, *space)
    noise: np.ndarray         # smoothed, unscaled, (fine_steps, *space)
    seed: int


@dataclass
class Dataset:
    problem: SPDEProblem
    trajectories: list
    split: str = "train"
    config_hash: str = ""
    sampler: "SamplerConfig" = None

    def __len__(self):
        return len(self.trajectories)


# -- single fine steps ---------------------------------------------------------


def _check_state(u: np.ndarray, step: int):
    if not np.all(np.isfinite(u)):
        raise SolverBlowUpError(
            f"state blew up at fine step {step}: max |u| = {np.nanmax(np.abs(u))!r}"
        )


def _rd_rhs(problem: SPDEProblem, u, f, xi_slice):
    rhs = np.array(f, dtype=np.float64, copy=True)
    if problem.mu_kind == "cubic":
        rhs += 3.0 * u - u ** 3
    elif problem.mu_kind != "none":
        raise ValueError(f"unknown mu_kind {problem.mu_kind!r}")
    if problem.noise_kind == "multiplicative":
        rhs += problem.sigma * u * xi_slice
    elif problem.noise_kind == "additive":
        rhs += problem.sigma * xi_slice
    elif problem.noise_kind != "none":
        raise ValueError(f"unknown noise_kind {problem.noise_kind!r}")
    return rhs


def step_rd(problem: SPDEProblem, u: np.ndarray, f: np.ndarray,
            xi_slice: np.ndarray, step: int = -1) -> np.ndarray:
    dt = problem.grid.dt_fine
    rhs = u + dt * _rd_rhs(problem, u, f, xi_slice)
    out = problem.propagator.solve(rhs)
    out[..., 0] = 0.0
    out[..., -1] = 0.0
    _check_state(out, step)
    return out


@dataclass(frozen=True)
class _SpectralTools:
    k1: np.ndarray
    k2: np.ndarray
    inv_lap: np.ndarray          # 1/(4 pi^2 |k|^2), zero at k=0
    dealias: np.ndarray

    @staticmethod
    def build(n: int) -> "_SpectralTools":
        k1 = np.fft.fftfreq(n, d=1.0 / n)[:, None]
        k2 = np.arange(n // 2 + 1)[None, :]
        ksq = 4.0 * np.pi ** 2 * (k1 ** 2 + k2 ** 2)
        inv_lap = np.zeros_like(ksq)
        inv_lap[ksq > 0] = 1.0 / ksq[ksq > 0]
        cut = n // 3
        dealias = (np.abs(k1) <= cut) & (k2 <= cut)
        return _SpectralTools(k1, k2, inv_lap, dealias)


_spectral_cache: dict = {}


def _spectral_tools(n: int) -> _SpectralTools:
    if n not in _spectral_cache:
        _spectral_cache[n] = _SpectralTools.build(n)
    return _spectral_cache[n]


def ns_velocity(w: np.ndarray) -> tuple:
    """Velocity (u_x, u_y) from vorticity via the streamfunction, spectrally."""
    n = w.shape[-1]
    tools = _spectral_tools(n)
    what = np.fft.rfft2(w, axes=(-2, -1))
    psi_hat = what * tools.inv_lap           # Lap(psi) = -w
    ux = np.fft.irfft2(2j * np.pi * tools.k2 * psi_hat, s=(n, n), axes=(-2, -1))
    uy = np.fft.irfft2(-2j * np.pi * tools.k1 * psi_hat, s=(n, n), axes=(-2, -1))
    return ux, uy


def step_ns(problem: SPDEProblem, w: np.ndarray, f: np.ndarray,
            xi_slice: np.ndarray, step: int = -1) -> np.ndarray:
    grid = problem.grid
    n = grid.n
    tools = _spectral_tools(n)
    what = np.fft.rfft2(w, axes=(-2, -1))
    psi_hat = what * tools.inv_lap
    ux = np.fft.irfft2(2j * np.pi * tools.k2 * psi_hat, s=(n, n), axes=(-2, -1))
    uy = np.fft.irfft2(-2j * np.pi * tools.k1 * psi_hat, s=(n, n), axes=(-2, -1))
    wx = np.fft.irfft2(2j * np.pi * tools.k1 * what, s=(n, n), axes=(-2, -1))
    wy = np.fft.irfft2(2j * np.pi * tools.k2 * what, s=(n, n), axes=(-2, -1))
    adv_hat = np.fft.rfft2(-(ux * wx + uy * wy), axes=(-2, -1)) * tools.dealias
    adv_hat[..., 0, 0] = 0.0                 # advection moves no mean vorticity
    adv = np.fft.irfft2(adv_hat, s=(n, n), axes=(-2, -1))
    rhs = w + grid.dt_fine * (adv + f + _additive_noise(problem, xi_slice))
    out = problem.propagator.solve(rhs)
    _check_state(out, step)
    return out


def _additive_noise(problem: SPDEProblem, xi_slice):
    if problem.noise_kind == "additive":
        return problem.sigma * xi_slice
    if problem.noise_kind == "none":
        return 0.0
    raise ValueError(f"NS supports additive noise only, got {problem.noise_kind!r}")


def advance_frame(problem: SPDEProblem, u: np.ndarray, f_slice: np.ndarray,
                  noise_block: np.ndarray, frame: int = -1) -> np.ndarray:
    """Integrate one coarse interval (fine_per_frame sub-steps), constant forcing."""
    stepper = step_rd if problem.kind == RD else step_ns
    base = frame * problem.grid.fine_per_frame
    for j in range(noise_block.shape[0]):
        u = stepper(problem, u, f_slice, noise_block[j], step=base + j)
    return u


def simulate(problem: SPDEProblem, u0: np.ndarray, forcing: np.ndarray,
             seed: int) -> Trajectory:
    """Integrate on the fine grid, record the coarse frames.

    ``forcing`` has one slice per coarse interval and is held constant
    across that interval's fine sub-steps.
    """
    grid = problem.grid
    if forcing.shape != (grid.frames - 1, *grid.space_shape):
        raise ValueError(f"forcing must have shape (frames-1, *space), got {forcing.shape}")
    nf = sample_smoothed_noise(grid, seed, window=problem.noise_window)
    u = np.array(problem.grid.pin(u0), dtype=np.float64)
    states = np.empty((grid.frames, *grid.space_shape))
    states[0] = u
    fpf = grid.fine_per_frame
    for k in range(grid.frames - 1):
        u = advance_frame(problem, u, forcing[k], nf.values[k * fpf:(k + 1) * fpf], k)
        states[k + 1] = u
    return Trajectory(states=states, forcing=np.array(forcing), noise=nf.values,
                      seed=seed)


# -- initial condition / forcing samplers --------------------------------------
#
# Stand-in distributions: truncated random sine/Fourier series with
# coefficient std proportional to 1/k^2, k_max modes.


def sample_field_1d(grid: Grid, gen, k_max: int = 8, amp: float = 1.0) -> np.ndarray:
    x = grid.coords()
    ks = np.arange(1, k_max + 1)
    coeffs = gen.standard_normal(k_max) * (amp / ks ** 2)
    return (coeffs[:, None] * np.sin(np.pi * ks[:, None] * x[None, :] / grid.length)).sum(axis=0)


def sample_field_2d(grid: Grid, gen, k_max: int = 8, amp: float = 1.0) -> np.ndarray:
    n = grid.n
    spec = np.zeros((n, n // 2 + 1), dtype=complex)
    for k1 in range(-k_max, k_max + 1):
        for k2 in range(0, k_max + 1):
            if k2 == 0 and k1 <= 0:
                continue                      # Hermitian partner fills these
            mag = amp / (k1 * k1 + k2 * k2)
            spec[k1 % n, k2] = mag * (gen.standard_normal() + 1j * gen.standard_normal())
    for k1 in range(1, k_max + 1):
        spec[n - k1, 0] = np.conj(spec[k1, 0])
    return np.fft.irfft2(spec, s=(n, n)) * (n * n / 2.0)


def sample_state(grid: Grid, gen, k_max: int = 8, amp: float = 1.0) -> np.ndarray:
    if grid.dim == 1:
        return sample_field_1d(grid, gen, k_max, amp)
    return sample_field_2d(grid, gen, k_max, amp)


def sample_forcing(grid: Grid, gen, k_max: int = 8, amp: float = 1.0) -> np.ndarray:
    """Independent random field per coarse interval."""
    return np.stack([sample_state(grid, gen, k_max, amp)
                     for _ in range(grid.frames - 1)])


@dataclass(frozen=True)
class SamplerConfig:
    k_max: int = 8
    ic_amp: float = 1.0
    forcing_amp: float = 1.0

    def as_dict(self) -> dict:
        return {"k_max": self.k_max, "ic_amp": self.ic_amp,
                "forcing_amp": self.forcing_amp}


def _make_trajectory(problem: SPDEProblem, sampler: SamplerConfig,
                     seed0: int, index: int) -> Trajectory:
    traj_seed = derive_seed(seed0, index)
    u0 = sample_state(problem.grid, generator(traj_seed, 0),
                      sampler.k_max, sampler.ic_amp)
    forcing = sample_forcing(problem.grid, generator(traj_seed, 1),
                             sampler.k_max, sampler.forcing_amp)
    return simulate(problem, u0, forcing, seed=derive_seed(traj_seed, 2))


def generate_dataset(problem: SPDEProblem, count: int, seed0: int,
                     sampler: SamplerConfig = SamplerConfig(),
                     split: str = "train", threads: int = 1) -> Dataset:
    """``count`` independent trajectories with per-index derived seeds.

    Thread-parallel generation is bit-identical to serial generation:
    every trajectory derives its own seeds from (seed0, index) and the
    results are collected in index order.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    indices = range(count)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            trajectories = list(pool.map(
                lambda i: _make_trajectory(problem, sampler, seed0, i), indices))
    else:
        trajectories = [_make_trajectory(problem, sampler, seed0, i) for i in indices]
    digest = config_hash({
        "problem": problem.descriptor(), "count": count, "seed0": seed0,
        "sampler": sampler.as_dict(), "split": split,
    })
    return Dataset(problem=problem, trajectories=trajectories, split=split,
                   config_hash=digest, sampler=sampler)
