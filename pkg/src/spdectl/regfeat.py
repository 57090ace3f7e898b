"""Regularity-structure feature block: symbolic terms and their evaluation.

Feature terms are built by iterated rounds of products and time integration.
Starting from the propagated initial state, each round forms products of up
to ``m`` (optionally derivative-tagged) previous-round features, optionally
multiplied by one forcing leaf (the combined deterministic+random forcing, or
separate deterministic/noise leaves with their own budgets), wraps every
product in a time integral against the semigroup, and unions the result with
the previous feature set.

Terms are immutable nested tuples with a canonical string key; products are
commutative, so factor lists are kept sorted and duplicates collapse.  The
numeric evaluation runs the discrete integral recursion

    I[z]_{t+1} = solve(I[z]_t + z_t * dt),    I[z]_0 = 0

with the factorized resolvent shared across all terms and steps, on either
plain ndarrays (fast path, used when caching features for training) or
Tensors (differentiable path, used when gradients must flow to the initial
state and the forcing, e.g. while training the policy through the model).
"""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations_with_replacement

import numpy as np

from .grid import Grid, Propagator, derivative_1d_matrix, \
    spectral_derivative_symbols
from .tensor import Tensor, apply_linear, stack
from .util import config_hash

S_IN = ("s",)

COMBINED = "combined"   # one leaf: deterministic forcing + scaled noise summed
SPLIT = "split"         # separate leaves: "f" (m-budget) and "xi" (l-budget)


class FeatureCountError(RuntimeError):
    """Enumeration exceeded the configured feature cap."""


@dataclass(frozen=True)
class FeatureSpec:
    """Heights (n, m, l) plus the forcing-leaf layout and derivative axes."""

    n: int
    m: int
    l: int
    forcing_mode: str = COMBINED
    dim: int = 1
    cap: int = 256
    both_axes: bool = True      # 2-D: expand the derivative tag to {d/dx, d/dy}

    def __post_init__(self):
        if self.n < 0 or self.m < 0 or self.l < 0:
            raise ValueError("feature heights must be non-negative")
        if self.forcing_mode not in (COMBINED, SPLIT):
            raise ValueError(f"unknown forcing mode {self.forcing_mode!r}")

    def leaf_budgets(self) -> tuple:
        if self.forcing_mode == COMBINED:
            return (("ftilde", self.l),)
        return (("f", self.m), ("xi", self.l))

    def leaf_names(self) -> tuple:
        return tuple(name for name, _ in self.leaf_budgets())

    def deriv_axes(self) -> tuple:
        if self.dim == 1 or not self.both_axes:
            return (0,)
        return (0, 1)

    def spec_hash(self) -> str:
        return config_hash({
            "n": self.n, "m": self.m, "l": self.l, "mode": self.forcing_mode,
            "dim": self.dim, "both_axes": self.both_axes,
        })


@lru_cache(maxsize=None)
def term_key(term) -> str:
    tag = term[0]
    if tag == "s":
        return "s"
    if tag == "leaf":
        return term[1]
    if tag == "d":
        return f"d{term[1]}({term_key(term[2])})"
    if tag == "I":
        return f"I({term_key(term[1])})"
    if tag == "prod":
        return "(" + "*".join(term_key(f) for f in term[1]) + ")"
    raise ValueError(f"unknown term tag {tag!r}")


def _product(factors) -> tuple:
    factors = tuple(sorted(factors, key=term_key))
    if len(factors) == 1:
        return factors[0]
    return ("prod", factors)


def enumerate_terms(spec: FeatureSpec) -> list:
    """Deduplicated feature set, in deterministic canonical-key order."""
    features = {S_IN}
    for _ in range(spec.n):
        atoms = []
        for s in sorted(features, key=term_key):
            atoms.append(s)
            for axis in spec.deriv_axes():
                atoms.append(("d", axis, s))
        atoms = sorted(set(atoms), key=term_key)
        integrands = set()
        for k in range(1, spec.m + 1):
            for combo in combinations_with_replacement(atoms, k):
                integrands.add(_product(combo))
        for leaf_name, budget in spec.leaf_budgets():
            leaf = ("leaf", leaf_name)
            for k in range(0, budget):          # one leaf factor counts toward the budget
                for combo in combinations_with_replacement(atoms, k):
                    integrands.add(_product(combo + (leaf,)))
        features |= {("I", z) for z in integrands}
        if len(features) > spec.cap:
            raise FeatureCountError(
                f"feature count {len(features)} exceeds cap {spec.cap} "
                f"for spec (n={spec.n}, m={spec.m}, l={spec.l})")
    return sorted(features, key=term_key)


# -- numeric evaluation --------------------------------------------------------


_active_timer = None


@contextlib.contextmanager
def time_features():
    """Accumulate wall-clock spent inside :func:`evaluate` (timing tables)."""
    global _active_timer
    prev = _active_timer
    _active_timer = {"seconds": 0.0}
    try:
        yield _active_timer
    finally:
        _active_timer = prev


_deriv_matrix_cache: dict = {}


def _deriv_matrix(n: int, eps: float) -> np.ndarray:
    key = (n, eps)
    if key not in _deriv_matrix_cache:
        _deriv_matrix_cache[key] = derivative_1d_matrix(n, eps)
    return _deriv_matrix_cache[key]


def spatial_derivative(field, grid: Grid, axis: int = 0):
    """d/dx_axis: central differences in 1-D (one-sided at the boundary),
    exact spectral derivative on 2-D periodic grids."""
    if grid.dim == 1:
        mat = _deriv_matrix(grid.n, grid.eps)
        fwd = lambda x: x @ mat.T
        adj = lambda g: g @ mat
        return apply_linear(field, fwd, adj, "ddx")
    sym = spectral_derivative_symbols(grid.n)[axis]

    def fwd(x):
        xf = np.fft.rfft2(x, axes=(-2, -1))
        return np.fft.irfft2(sym * xf, s=(grid.n, grid.n), axes=(-2, -1))

    def adj(g):
        return -fwd(g)          # anti-symmetric operator

    return apply_linear(field, fwd, adj, f"ddx{axis}")


def _zeros_like(value):
    if isinstance(value, Tensor):
        return Tensor(np.zeros_like(value.data))
    return np.zeros_like(value)


def initial_feature(u0, propagator: Propagator, grid: Grid, n_steps: int) -> list:
    """Semigroup action on the initial state: s_{t+1} = solve(s_t), s_0 = u0."""
    series = [grid.pin(u0)]
    for _ in range(n_steps):
        series.append(grid.pin(propagator.solve(series[-1])))
    return series


@dataclass
class FeatureSet:
    """Evaluated features: one field per term per requested sample step."""

    spec: FeatureSpec
    terms: list
    sample_steps: list
    fields: dict          # term -> list of fields, aligned with sample_steps

    @property
    def count(self) -> int:
        return len(self.terms)

    def stacked(self, sample_index: int = -1):
        """Stack all feature fields at one sample step along a new axis.

        For batched (B, *space) fields the result is (B, N_S, *space).
        """
        values = [self.fields[t][sample_index] for t in self.terms]
        if isinstance(values[0], Tensor):
            return stack(values, axis=1 if values[0].ndim > self.spec.dim else 0)
        return np.stack(values, axis=1 if values[0].ndim > self.spec.dim else 0)


def evaluate(spec: FeatureSpec, u0, leaves: dict, propagator: Propagator,
             grid: Grid, n_steps: int, sample_steps=None) -> FeatureSet:
    """Evaluate every feature field over ``n_steps`` fine steps.

    ``leaves`` maps each leaf name from the spec to a sequence of ``n_steps``
    fields (the value on each left endpoint); a piecewise-constant forcing
    can repeat the same object.  Sampling defaults to every step.
    All inputs may be ndarrays or Tensors; gradients flow through products,
    derivatives and solves in Tensor mode.
    """
    t_begin = time.perf_counter()
    if sample_steps is None:
        sample_steps = list(range(n_steps + 1))
    missing = [name for name in spec.leaf_names() if name not in leaves]
    if missing:
        raise KeyError(f"missing forcing leaves: {missing}")
    for name in spec.leaf_names():
        if len(leaves[name]) != n_steps:
            raise ValueError(f"leaf {name!r} needs {n_steps} slices")

    terms = enumerate_terms(spec)
    series: dict = {S_IN: initial_feature(u0, propagator, grid, n_steps)}
    deriv_cache: dict = {}

    def deriv_series(axis, sub):
        key = (axis, sub)
        if key not in deriv_cache:
            deriv_cache[key] = [spatial_derivative(v, grid, axis) for v in series[sub]]
        return deriv_cache[key]

    def factor_value(factor, t):
        tag = factor[0]
        if tag in ("s", "I"):
            return series[factor][t]
        if tag == "leaf":
            return leaves[factor[1]][t]
        if tag == "d":
            return deriv_series(factor[1], factor[2])[t]
        raise ValueError(f"unexpected factor {factor!r}")

    def integrand_value(z, t):
        factors = z[1] if z[0] == "prod" else (z,)
        value = factor_value(factors[0], t)
        for f in factors[1:]:
            value = value * factor_value(f, t)
        return value

    dt = propagator.dt
    # integrate round by round so product factors are always available
    pending = [t for t in terms if t != S_IN]
    pending.sort(key=lambda t: _depth(t))
    for term in pending:
        z = term[1]
        z0 = integrand_value(z, 0)
        acc = [_zeros_like(z0)]
        zt = z0
        for t in range(n_steps):
            if t > 0:
                zt = integrand_value(z, t)
            acc.append(grid.pin(propagator.solve(acc[-1] + zt * dt)))
        series[term] = acc

    fields = {t: [series[t][k] for k in sample_steps] for t in terms}
    if _active_timer is not None:
        _active_timer["seconds"] += time.perf_counter() - t_begin
    return FeatureSet(spec=spec, terms=terms, sample_steps=list(sample_steps),
                      fields=fields)


@lru_cache(maxsize=None)
def _depth(term) -> int:
    """Integration nesting depth; orders evaluation so parents come first."""
    tag = term[0]
    if tag in ("s", "leaf"):
        return 0
    if tag == "d":
        return _depth(term[2])
    if tag == "I":
        return 1 + _depth(term[1])
    return max(_depth(f) for f in term[1])
