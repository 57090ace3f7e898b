"""Spatial/temporal discretizations, discrete operators and propagators.

A :class:`Grid` couples the spatial mesh (1-D Dirichlet interval or 2-D
periodic square) with the two-level time grid used throughout: ``frames``
coarse frames on [0, T] at which states are recorded and controls switch,
each subdivided into ``fine_per_frame`` integration sub-steps.

:class:`DiscreteOperator` holds the discretized linear part (tridiagonal
second-difference matrix with Dirichlet pinning in 1-D, Fourier symbol in
2-D periodic).  :class:`Propagator` is the factorized resolvent
``(Id - dt*L)^{-1}`` reused across every time step and every feature; it
accepts plain ndarrays (fast path) or Tensors (differentiable path).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import lapack

from .tensor import Tensor, apply_linear

DIRICHLET = "dirichlet-zero"
PERIODIC = "periodic"


@dataclass(frozen=True)
class Grid:
    """Uniform space-time grid for one problem instance.

    1-D grids store all ``n`` points including the two boundary points
    (spacing ``length/(n-1)``); 2-D periodic grids store ``n x n`` points
    with spacing ``length/n``.
    """

    dim: int
    n: int
    length: float = 1.0
    bc: str = DIRICHLET
    frames: int = 11
    fine_per_frame: int = 20
    T: float = 1.0

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError("grid dim must be 1 or 2")
        if self.frames < 2:
            raise ValueError("need at least two time frames")
        if self.fine_per_frame < 1:
            raise ValueError("fine_per_frame must be >= 1")
        if self.bc not in (DIRICHLET, PERIODIC):
            raise ValueError(f"unknown boundary condition {self.bc!r}")
        if self.n < 2:
            raise ValueError("grid needs n >= 2")

    @property
    def eps(self) -> float:
        if self.bc == DIRICHLET:
            return self.length / (self.n - 1)
        return self.length / self.n

    @property
    def dt_coarse(self) -> float:
        return self.T / (self.frames - 1)

    @property
    def dt_fine(self) -> float:
        return self.dt_coarse / self.fine_per_frame

    @property
    def fine_steps(self) -> int:
        return (self.frames - 1) * self.fine_per_frame

    @property
    def space_shape(self) -> tuple:
        return (self.n,) if self.dim == 1 else (self.n, self.n)

    @property
    def cell_volume(self) -> float:
        return self.eps ** self.dim

    def coords(self):
        """Point coordinates: x (1-D) or (xx, yy) meshgrid (2-D)."""
        if self.dim == 1:
            if self.bc == DIRICHLET:
                return np.linspace(0.0, self.length, self.n)
            return np.arange(self.n) * self.eps
        x = np.arange(self.n) * self.eps
        return np.meshgrid(x, x, indexing="ij")

    def frame_times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.frames)

    @cached_property
    def _pin_mask(self) -> np.ndarray:
        mask = np.ones(self.space_shape)
        if self.bc == DIRICHLET:
            mask[0] = 0.0
            mask[-1] = 0.0
        return mask

    @cached_property
    def _pin_mask_tensor(self) -> Tensor:
        return Tensor(self._pin_mask)

    def pin(self, field):
        """Zero the Dirichlet boundary entries (identity for periodic)."""
        if self.bc == PERIODIC:
            return field
        if isinstance(field, Tensor):
            return field * self._pin_mask_tensor
        return field * self._pin_mask


@dataclass(frozen=True)
class DiscreteOperator:
    """Discretized linear operator: tridiagonal matrix or Fourier symbol."""

    kind: str                       # "tridiagonal" or "spectral-symbol"
    bc: str
    n: int
    diag: float = 0.0               # tridiagonal coefficients
    off: float = 0.0
    symbol: np.ndarray = None       # (n, n//2+1) real symbol, rfft2 layout

    def scaled(self, c: float) -> "DiscreteOperator":
        if self.kind == "tridiagonal":
            return DiscreteOperator(self.kind, self.bc, self.n,
                                    diag=c * self.diag, off=c * self.off)
        return DiscreteOperator(self.kind, self.bc, self.n, symbol=c * self.symbol)

    def _apply_data(self, x: np.ndarray) -> np.ndarray:
        if self.kind == "tridiagonal":
            y = self.diag * x
            y[..., :-1] += self.off * x[..., 1:]
            y[..., 1:] += self.off * x[..., :-1]
            return y
        xf = np.fft.rfft2(x, axes=(-2, -1))
        return np.fft.irfft2(self.symbol * xf, s=(self.n, self.n), axes=(-2, -1))

    def apply(self, x):
        """L x; symmetric in both representations, so the adjoint is itself."""
        return apply_linear(x, self._apply_data, self._apply_data, "op-apply")

    def matrix(self) -> np.ndarray:
        """Dense form, for small-grid oracles only."""
        if self.kind != "tridiagonal":
            raise ValueError("dense form only available for tridiagonal operators")
        m = np.zeros((self.n, self.n))
        np.fill_diagonal(m, self.diag)
        idx = np.arange(self.n - 1)
        m[idx, idx + 1] = self.off
        m[idx + 1, idx] = self.off
        return m


def laplacian_1d(n: int, eps: float, bc: str = DIRICHLET) -> DiscreteOperator:
    """Second-difference matrix: -2/eps^2 on the diagonal, 1/eps^2 off it."""
    if n < 3:
        raise ValueError("laplacian_1d needs n >= 3")
    if bc != DIRICHLET:
        raise ValueError("1-D laplacian is built for Dirichlet grids")
    return DiscreteOperator("tridiagonal", bc, n, diag=-2.0 / eps**2, off=1.0 / eps**2)


def laplacian_2d_spectral(n: int) -> DiscreteOperator:
    """Fourier symbol -(2*pi)^2 (k1^2 + k2^2) on the periodic unit square."""
    if n < 4:
        raise ValueError("laplacian_2d_spectral needs n >= 4")
    k1 = np.fft.fftfreq(n, d=1.0 / n)
    k2 = np.arange(n // 2 + 1)
    symbol = -4.0 * np.pi**2 * (k1[:, None] ** 2 + k2[None, :] ** 2)
    return DiscreteOperator("spectral-symbol", PERIODIC, n, symbol=symbol)


class Propagator:
    """Factorized solve for (Id - L*dt)^{-1}, reused across steps and features.

    1-D Dirichlet: the boundary rows are pinned (identity), so the factored
    system is the interior (n-2) tridiagonal LU (LAPACK gttrf/gttrs); solving
    the untruncated matrix and re-pinning afterwards would leak an O(1/n)
    eigenvalue shift through the boundary rows.
    2-D periodic: per-mode scalar reciprocal of the Fourier symbol.
    """

    def __init__(self, op: DiscreteOperator, dt: float):
        if dt <= 0:
            raise ValueError("propagator needs dt > 0")
        self.op = op
        self.dt = dt
        if op.kind == "tridiagonal":
            n_int = op.n - 2
            if n_int == 1:                    # LAPACK rejects empty off-diagonals
                self._factors = 1.0 / (1.0 - dt * op.diag)
            else:
                d = np.full(n_int, 1.0 - dt * op.diag)
                e = np.full(n_int - 1, -dt * op.off)
                dl, dd, du, du2, ipiv, info = lapack.dgttrf(e.copy(), d, e.copy())
                if info != 0:
                    raise np.linalg.LinAlgError(
                        f"tridiagonal factorization failed: info={info}")
                self._factors = (dl, dd, du, du2, ipiv)
            self._gain = None
        elif op.kind == "spectral-symbol":
            self._factors = None
            self._gain = 1.0 / (1.0 - dt * op.symbol)
        else:
            raise ValueError(f"unsupported operator kind {op.kind!r}")

    def _solve_data(self, b: np.ndarray) -> np.ndarray:
        if self._factors is not None:
            out = np.array(b, dtype=np.float64)
            if isinstance(self._factors, float):
                out[..., 1:-1] *= self._factors
                return out
            dl, dd, du, du2, ipiv = self._factors
            flat = b[..., 1:-1].reshape(-1, b.shape[-1] - 2).T   # (n-2, nrhs)
            x, info = lapack.dgttrs(dl, dd, du, du2, ipiv, np.asfortranarray(flat))
            if info != 0:
                raise np.linalg.LinAlgError(f"tridiagonal solve failed: info={info}")
            out[..., 1:-1] = x.T.reshape(out[..., 1:-1].shape)
            return out
        n = self.op.n
        bf = np.fft.rfft2(b, axes=(-2, -1))
        return np.fft.irfft2(self._gain * bf, s=(n, n), axes=(-2, -1))

    def solve(self, b):
        """(Id - L*dt)^{-1} b; the matrix is symmetric, so adjoint = solve."""
        return apply_linear(b, self._solve_data, self._solve_data, "resolvent")

    def _forward_data(self, x: np.ndarray) -> np.ndarray:
        if self.op.kind == "tridiagonal":
            # pinned system: boundary values do not couple into the interior
            xp = np.array(x, dtype=np.float64)
            xp[..., 0] = 0.0
            xp[..., -1] = 0.0
            y = np.array(x, dtype=np.float64)
            y[..., 1:-1] -= self.dt * self.op._apply_data(xp)[..., 1:-1]
            return y
        return x - self.dt * self.op._apply_data(x)

    def apply_forward(self, x):
        """(Id - L*dt) x with the same pinned-boundary convention as solve."""
        return apply_linear(x, self._forward_data, self._forward_data, "resolvent-fwd")


def derivative_1d_matrix(n: int, eps: float) -> np.ndarray:
    """Central first difference, one-sided at the two boundary rows."""
    m = np.zeros((n, n))
    idx = np.arange(1, n - 1)
    m[idx, idx + 1] = 0.5 / eps
    m[idx, idx - 1] = -0.5 / eps
    m[0, 0], m[0, 1] = -1.0 / eps, 1.0 / eps
    m[n - 1, n - 2], m[n - 1, n - 1] = -1.0 / eps, 1.0 / eps
    return m


def spectral_derivative_symbols(n: int) -> tuple:
    """(i*2*pi*k1, i*2*pi*k2) symbols in rfft2 layout for the unit square."""
    k1 = np.fft.fftfreq(n, d=1.0 / n)
    k2 = np.arange(n // 2 + 1)
    sym1 = (2j * np.pi * k1)[:, None] * np.ones(n // 2 + 1)[None, :]
    sym2 = np.ones(n)[:, None] * (2j * np.pi * k2)[None, :]
    return sym1, sym2
