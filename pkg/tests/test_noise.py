import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spdectl.grid import Grid, PERIODIC
from spdectl.noise import sample_smoothed_noise, sample_white_noise, smooth


def test_fixed_seed_reproducible():
    grid = Grid(dim=1, n=16, frames=3, fine_per_frame=4)
    a = sample_white_noise(grid, 12345)
    b = sample_white_noise(grid, 12345)
    assert np.array_equal(a.values, b.values)
    c = sample_white_noise(grid, 12346)
    assert not np.array_equal(a.values, c.values)


def test_smoothed_regeneration_bit_identical():
    grid = Grid(dim=1, n=16, frames=3, fine_per_frame=4)
    a = sample_smoothed_noise(grid, 7, window=3)
    b = sample_smoothed_noise(grid, 7, window=3)
    assert np.array_equal(a.values, b.values)
    assert a.smoothed and a.window == 3


def test_cell_mean_clt_bound():
    # mean over 10^4 cells at fixed position: |mean| < 3 sigma_cell / 100
    grid = Grid(dim=1, n=8, frames=2, fine_per_frame=2)
    gen_count = 10_000
    vals = np.empty(gen_count)
    for i in range(gen_count):
        vals[i] = sample_white_noise(grid, 50_000 + i).values[0, 3]
    sigma_cell = 1.0 / np.sqrt(grid.dt_fine * grid.eps)
    assert abs(vals.mean()) < 3 * sigma_cell / 100


def test_cell_variance_matches_definition():
    grid = Grid(dim=1, n=8, frames=2, fine_per_frame=2)
    vals = np.stack([sample_white_noise(grid, 80_000 + i).values
                     for i in range(10_000)])
    target = 1.0 / (grid.dt_fine * grid.eps)
    measured = vals.var(axis=0).mean()
    assert abs(measured / target - 1.0) < 0.05


def test_window_one_is_identity():
    grid = Grid(dim=1, n=16, frames=3, fine_per_frame=4)
    field = sample_white_noise(grid, 3)
    out = smooth(field, grid, window=1)
    assert np.array_equal(out.values, field.values)


def test_even_window_rejected():
    grid = Grid(dim=1, n=16, frames=3, fine_per_frame=4)
    with pytest.raises(ValueError):
        smooth(sample_white_noise(grid, 3), grid, window=4)


def test_constant_preserved():
    grid = Grid(dim=1, n=10, frames=2, fine_per_frame=2)
    field = sample_white_noise(grid, 5)
    const = type(field)(values=np.full_like(field.values, 4.2), seed=5)
    out = smooth(const, grid, window=3)
    assert np.allclose(out.values, 4.2)


def test_hand_computed_clamped_average():
    grid = Grid(dim=1, n=4, frames=2, fine_per_frame=1)
    field = sample_white_noise(grid, 1)
    src = type(field)(values=np.array([[0.0, 3.0, 0.0, 0.0]]), seed=1)
    out = smooth(src, grid, window=3)
    assert np.allclose(out.values, [[1.0, 1.0, 1.0, 0.0]])


def test_periodic_2d_wraparound():
    grid = Grid(dim=2, n=4, bc=PERIODIC, frames=2, fine_per_frame=1)
    values = np.zeros((1, 4, 4))
    values[0, 0, 0] = 9.0
    field = sample_white_noise(grid, 1)
    out = smooth(type(field)(values=values, seed=1), grid, window=3)
    # separable 3x3 wrap average spreads mass to the wrapped neighborhood
    assert out.values[0, 0, 0] == pytest.approx(1.0)
    assert out.values[0, 3, 3] == pytest.approx(1.0)
    assert out.values[0, 2, 2] == pytest.approx(0.0)
    assert out.values.sum() == pytest.approx(9.0)


@given(st.integers(0, 2 ** 31), st.floats(-3, 3), st.floats(-3, 3))
@settings(max_examples=25, deadline=None)
def test_smoothing_linearity_exact(seed, a, b):
    grid = Grid(dim=1, n=12, frames=2, fine_per_frame=3)
    f1 = sample_white_noise(grid, seed)
    f2 = sample_white_noise(grid, seed + 1)
    combo = type(f1)(values=a * f1.values + b * f2.values, seed=0)
    lhs = smooth(combo, grid, window=3).values
    rhs = a * smooth(f1, grid, window=3).values + b * smooth(f2, grid, window=3).values
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-9 * (1 + abs(a) + abs(b)))


@given(st.integers(0, 2 ** 31))
@settings(max_examples=25, deadline=None)
def test_smoothing_does_not_increase_l2(seed):
    for dim, bc in ((1, "dirichlet-zero"), (2, "periodic")):
        grid = Grid(dim=dim, n=8, bc=bc, frames=2, fine_per_frame=2)
        field = sample_white_noise(grid, seed)
        out = smooth(field, grid, window=3)
        for t in range(field.values.shape[0]):
            assert np.linalg.norm(out.values[t]) <= np.linalg.norm(field.values[t]) + 1e-12
