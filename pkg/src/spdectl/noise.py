"""Discretized space-time white noise and its moving-average smoothing.

A white-noise field carries i.i.d. N(0, 1/(dt*eps^d)) entries per space-time
cell of the fine integration grid, so that cell averages approximate the
white-noise distribution as the grid refines.  Smoothing is a spatial moving
average applied per time slice: clamped edges on Dirichlet grids, wrap-around
(separably per axis) on periodic grids.  Both operations are pure functions
of (seed, grid, window).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .grid import DIRICHLET, Grid
from .rng import generator


@dataclass(frozen=True)
class NoiseField:
    """Noise values on the fine (time x space) grid, plus provenance."""

    values: np.ndarray          # (fine_steps, *space_shape)
    seed: int
    scale: float = 1.0          # consumer-applied multiplier (problem sigma)
    smoothed: bool = False
    window: int = 1


def sample_white_noise(grid: Grid, seed: int, scale: float = 1.0) -> NoiseField:
    """i.i.d. Gaussian cells with variance 1/(dt_fine * eps^dim)."""
    gen = generator(seed)
    std = 1.0 / np.sqrt(grid.dt_fine * grid.cell_volume)
    values = gen.standard_normal((grid.fine_steps, *grid.space_shape)) * std
    return NoiseField(values=values, seed=seed, scale=scale)


def _moving_average(values: np.ndarray, window: int, axis: int, mode: str) -> np.ndarray:
    p = window // 2
    width = [(0, 0)] * values.ndim
    width[axis] = (p, p)
    padded = np.pad(values, width, mode=mode)
    out = np.zeros_like(values)
    length = values.shape[axis]
    for t in range(window):
        idx = [slice(None)] * values.ndim
        idx[axis] = slice(t, t + length)
        out += padded[tuple(idx)]
    return out / window

def smooth(field: NoiseField, grid: Grid, window: int = 3) -> NoiseField:
    """Spatial moving average of each time slice; window 1 is the identity."""
    if window % 2 == 0 or window < 1:
        raise ValueError("smoothing window must be odd and positive")
    if window == 1:
        return replace(field, smoothed=True, window=1)
    mode = "edge" if grid.bc == DIRICHLET else "wrap"
    out = field.values
    for axis in range(1, 1 + grid.dim):
        out = _moving_average(out, window, axis, mode)
    return replace(field, values=out, smoothed=True, window=window)


def sample_smoothed_noise(grid: Grid, seed: int, window: int = 3,
                          scale: float = 1.0) -> NoiseField:
    return smooth(sample_white_noise(grid, seed, scale), grid, window)
