import numpy as np
import pytest

from spdectl.grid import Grid, Propagator, laplacian_1d
from spdectl.solver import rd_problem


def central_diff_check(make_loss, tensors, n_probes=6, h=1e-5, seed=0):
    """Worst relative error between tape gradients and central differences."""
    for t in tensors:
        t.grad = None
    loss = make_loss()
    loss.backward()
    grads = [np.array(t.grad) for t in tensors]
    rs = np.random.default_rng(seed)
    worst = 0.0
    for t, g in zip(tensors, grads):
        for _ in range(n_probes):
            idx = tuple(rs.integers(0, s) for s in t.shape)
            orig = t.data[idx]
            t.data[idx] = orig + h
            lp = make_loss().item()
            t.data[idx] = orig - h
            lm = make_loss().item()
            t.data[idx] = orig
            fd = (lp - lm) / (2 * h)
            rel = abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), 1e-10)
            worst = max(worst, rel)
    for t in tensors:
        t.grad = None
    return worst


@pytest.fixture
def small_grid():
    return Grid(dim=1, n=16, frames=3, fine_per_frame=4)


@pytest.fixture
def small_propagator(small_grid):
    op = laplacian_1d(small_grid.n, small_grid.eps).scaled(0.1)
    return Propagator(op, small_grid.dt_fine)


@pytest.fixture
def rd_small():
    return rd_problem(n=32, frames=5, fine_per_frame=5)
