"""Dense float64 tensors with reverse-mode automatic differentiation.

Every learned component in this package runs on this engine.  A ``Tensor``
wraps a row-major ``numpy`` float64 array plus an optional tape node
(parent references and a backward closure).  Calling :meth:`Tensor.backward`
on a scalar result walks the tape once in reverse topological order and
accumulates ``grad`` arrays on every leaf created with
``requires_grad=True``.

Design notes:

* float64 everywhere; the finite-difference oracles in the test suite need
  the headroom.
* broadcasting follows numpy's trailing-dimension rule and gradients are
  summed back to the operand shapes.
* convolution and the spectral (FFT) layer are fused primitives with
  hand-derived adjoints rather than compositions of many small ops; both
  are validated against central finite differences.
* tensors are immutable after construction except for in-place parameter
  updates performed by :func:`adam_step` between forward passes.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible under the trailing-dimension rule."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where the caller required finite values."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block (inference / oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _asarray(values) -> np.ndarray:
    return np.asarray(values, dtype=np.float64)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (reverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """n-dimensional float64 array with an optional autodiff tape node."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    # make numpy defer mixed ndarray-op-Tensor expressions to our reflected ops
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False):
        arr = _asarray(data)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor constructed from non-finite values")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self._op = "leaf"

    @classmethod
    def _from_op(cls, data: np.ndarray, parents, backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        parents = tuple(p for p in parents if isinstance(p, Tensor))
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        out._op = op
        return out

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def assert_finite(self, what: str = "tensor") -> "Tensor":
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteError(f"non-finite values in {what}")
        return self

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self._op}, grad={self.requires_grad})"

    # -- tape ------------------------------------------------------------------

    def _accumulate(self, contribution: np.ndarray):
        # first contribution is copied: the incoming array may alias another
        # node's gradient (e.g. both parents of an add receive the same g)
        if self.grad is None:
            self.grad = np.array(contribution, dtype=np.float64)
        else:
            self.grad += contribution

    def backward(self):
        """Accumulate d(self)/d(leaf) on every requires_grad leaf.

        ``self`` must be scalar (size 1).  Visits each tape node exactly
        once; gradients of interior nodes are freed as soon as consumed.
        """
        if self.size != 1:
            raise ValueError("backward() root must be a scalar tensor")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, processed = stack.pop()
            if processed:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            if node._backward is None:
                continue
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            node._backward(node.grad)
            if node._parents:
                node.grad = None

    def zero_grad(self):
        self.grad = None

    # -- elementwise arithmetic --------------------------------------------

    @staticmethod
    def _coerce(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    @staticmethod
    def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str):
        try:
            np.broadcast_shapes(a.shape, b.shape)
        except ValueError as exc:
            raise ShapeMismatchError(f"{op}: {a.shape} vs {b.shape}") from exc

    def __add__(self, other):
        other = self._coerce(other)
        self._check_broadcast(self.data, other.data, "add")
        out_data = self.data + other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.shape))

        return Tensor._from_op(out_data, (self, other), backward, "add")

    def __sub__(self, other):
        other = self._coerce(other)
        self._check_broadcast(self.data, other.data, "sub")
        out_data = self.data - other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(-g, other.shape))

        return Tensor._from_op(out_data, (self, other), backward, "sub")

    def __mul__(self, other):
        other = self._coerce(other)
        self._check_broadcast(self.data, other.data, "mul")
        out_data = self.data * other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.shape))

        return Tensor._from_op(out_data, (self, other), backward, "mul")

    def __truediv__(self, other):
        other = self._coerce(other)
        self._check_broadcast(self.data, other.data, "div")
        out_data = self.data / other.data

        def backward(g):
            if self.requires_grad:
                self._accumulate(_unbroadcast(g / other.data, self.shape))
            if other.requires_grad:
                other._accumulate(
                    _unbroadcast(-g * self.data / (other.data * other.data), other.shape)
                )

        return Tensor._from_op(out_data, (self, other), backward, "div")

    def __neg__(self):
        def backward(g):
            if self.requires_grad:
                self._accumulate(-g)

        return Tensor._from_op(-self.data, (self,), backward, "neg")

    __radd__ = __add__
    __rmul__ = __mul__

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only scalar constant exponents are supported")
        out_data = self.data ** exponent

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * exponent * self.data ** (exponent - 1))

        return Tensor._from_op(out_data, (self,), backward, f"pow{exponent}")

    def tanh(self):
        t = np.tanh(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * (1.0 - t * t))

        return Tensor._from_op(t, (self,), backward, "tanh")

    def exp(self):
        e = np.exp(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * e)

        return Tensor._from_op(e, (self,), backward, "exp")

    def sqrt(self):
        r = np.sqrt(self.data)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * 0.5 / r)

        return Tensor._from_op(r, (self,), backward, "sqrt")

    def relu(self):
        mask = self.data > 0

        def backward(g):
            if self.requires_grad:
                self._accumulate(g * mask)

        return Tensor._from_op(self.data * mask, (self,), backward, "relu")

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def backward(g):
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.shape))
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                self._accumulate(np.broadcast_to(gg, self.shape))

        return Tensor._from_op(np.asarray(out_data), (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            count = self.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            count = int(np.prod([self.shape[a % self.ndim] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- shape manipulation ---------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old_shape = self.shape
        out_data = self.data.reshape(shape)

        def backward(g):
            if self.requires_grad:
                self._accumulate(g.reshape(old_shape))

        return Tensor._from_op(out_data, (self,), backward, "reshape")

    def __getitem__(self, key):
        out_data = self.data[key]

        def backward(g):
            if self.requires_grad:
                buf = np.zeros_like(self.data)
                buf[key] += g
                self._accumulate(buf)

        return Tensor._from_op(out_data, (self,), backward, "slice")

    def __matmul__(self, other):
        other = self._coerce(other)
        try:
            out_data = np.matmul(self.data, other.data)
        except ValueError as exc:
            raise ShapeMismatchError(
                f"matmul: {self.shape} @ {other.shape}"
            ) from exc

        def backward(g):
            if self.requires_grad:
                ga = np.matmul(g, np.swapaxes(other.data, -1, -2))
                self._accumulate(_unbroadcast(ga, self.shape))
            if other.requires_grad:
                gb = np.matmul(np.swapaxes(self.data, -1, -2), g)
                other._accumulate(_unbroadcast(gb, other.shape))

        return Tensor._from_op(out_data, (self, other), backward, "matmul")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t._accumulate(g[tuple(idx)])

    return Tensor._from_op(out_data, tuple(tensors), backward, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = [Tensor._coerce(t) for t in tensors]
    out_data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                t._accumulate(np.take(g, i, axis=axis))

    return Tensor._from_op(out_data, tuple(tensors), backward, "stack")


def apply_linear(x, forward, adjoint, op: str = "linop"):
    """Record a linear map with a known adjoint as a single tape node.

    ``forward`` and ``adjoint`` act on plain ndarrays.  Used by the grid
    module for operator applications and factorized solves; accepts a
    Tensor (differentiable) or a bare ndarray (fast path).
    """
    if not isinstance(x, Tensor):
        return forward(x)
    out_data = forward(x.data)

    def backward(g):
        if x.requires_grad:
            x._accumulate(adjoint(g))

    return Tensor._from_op(out_data, (x,), backward, op)


# -- convolution -------------------------------------------------------------


def _pad_spatial(x: np.ndarray, pads, mode: str) -> np.ndarray:
    width = [(0, 0)] * (x.ndim - len(pads)) + [(p, p) for p in pads]
    if mode == "zero":
        return np.pad(x, width)
    if mode == "periodic":
        return np.pad(x, width, mode="wrap")
    raise ValueError(f"unknown padding mode {mode!r}")


def _fold_padding(gxp: np.ndarray, pads, mode: str) -> np.ndarray:
    """Adjoint of :func:`_pad_spatial`: fold gradient of the padded array."""
    nd = gxp.ndim
    for offset, p in enumerate(reversed(pads)):
        axis = nd - 1 - offset
        if p == 0:
            continue
        if mode == "periodic":
            head = np.take(gxp, range(0, p), axis=axis)
            tail = np.take(gxp, range(gxp.shape[axis] - p, gxp.shape[axis]), axis=axis)
        core = np.take(gxp, range(p, gxp.shape[axis] - p), axis=axis).copy()
        if mode == "periodic":
            idx_tail = [slice(None)] * nd
            idx_tail[axis] = slice(core.shape[axis] - p, core.shape[axis])
            core[tuple(idx_tail)] += head
            idx_head = [slice(None)] * nd
            idx_head[axis] = slice(0, p)
            core[tuple(idx_head)] += tail
        gxp = core
    return gxp


def conv1d(x: Tensor, weight: Tensor, bias=None, padding: str = "zero") -> Tensor:
    """Channelwise cross-correlation, spatial extent preserved.

    ``x`` is (batch, C_in, W); ``weight`` is (C_out, C_in, K) with K odd.
    Implemented as im2col + one GEMM per direction.
    """
    xB, ci, width = x.shape
    co, ci_w, k = weight.shape
    if k % 2 == 0:
        raise ValueError("conv1d requires an odd kernel size")
    if ci != ci_w:
        raise ShapeMismatchError(f"conv1d channels: input {ci}, kernel {ci_w}")
    p = k // 2
    xp = _pad_spatial(x.data, (p,), padding)
    # (B, Ci, W, K) windows -> (B*W, Ci*K) columns
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=-1)
    cols = np.ascontiguousarray(win.transpose(0, 2, 1, 3)).reshape(xB * width, ci * k)
    wmat = weight.data.reshape(co, ci * k)
    out = (cols @ wmat.T).reshape(xB, width, co).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 1)).reshape(xB * width, co)
        if weight.requires_grad:
            weight._accumulate((gt.T @ cols).reshape(co, ci, k))
        if x.requires_grad:
            dcols = (gt @ wmat).reshape(xB, width, ci, k).transpose(0, 2, 1, 3)
            gxp = np.zeros_like(xp)
            for t in range(k):
                gxp[:, :, t:t + width] += dcols[..., t]
            x._accumulate(_fold_padding(gxp, (p,), padding))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2)))

    return Tensor._from_op(np.ascontiguousarray(out), parents, backward, "conv1d")


def conv2d(x: Tensor, weight: Tensor, bias=None, padding: str = "zero") -> Tensor:
    """2-D cross-correlation: x (batch, C_in, H, W), weight (C_out, C_in, Kh, Kw)."""
    xB, ci, h, w = x.shape
    co, ci_w, kh, kw = weight.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("conv2d requires odd kernel sizes")
    if ci != ci_w:
        raise ShapeMismatchError(f"conv2d channels: input {ci}, kernel {ci_w}")
    ph, pw = kh // 2, kw // 2
    xp = _pad_spatial(x.data, (ph, pw), padding)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(-2, -1))
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)) \
        .reshape(xB * h * w, ci * kh * kw)
    wmat = weight.data.reshape(co, ci * kh * kw)
    out = (cols @ wmat.T).reshape(xB, h, w, co).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gt = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(xB * h * w, co)
        if weight.requires_grad:
            weight._accumulate((gt.T @ cols).reshape(co, ci, kh, kw))
        if x.requires_grad:
            dcols = (gt @ wmat).reshape(xB, h, w, ci, kh, kw).transpose(0, 3, 1, 2, 4, 5)
            gxp = np.zeros_like(xp)
            for a in range(kh):
                for b in range(kw):
                    gxp[:, :, a:a + h, b:b + w] += dcols[..., a, b]
            x._accumulate(_fold_padding(gxp, (ph, pw), padding))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))

    return Tensor._from_op(np.ascontiguousarray(out), parents, backward, "conv2d")


# -- spectral layer ----------------------------------------------------------
#
# VJP conventions for the real FFT pair (real loss, Wirtinger gradients
# G = dL/dRe + i dL/dIm):
#   rfft adjoint:   grad_x = Re(n * ifft(zero_pad(G)))
#   irfft adjoint:  G_Y  = (2/n) * rfft(g), DC and Nyquist bins halved
# and for complex-linear maps Y = W X: G_X = conj(W) G_Y, G_W = conj(X) G_Y.


def _irfft_vjp_scale(gy: np.ndarray, n: int) -> np.ndarray:
    gy = gy * (2.0 / n)
    gy[..., 0] *= 0.5
    if n % 2 == 0:
        gy[..., -1] *= 0.5
    return gy


def spectral_multiply(x: Tensor, w_real: Tensor, w_imag: Tensor, modes: int) -> Tensor:
    """Per-mode complex channel mixing on the lowest ``modes`` frequencies.

    x is (batch, C_in, n); weights are (C_in, C_out, modes).  Frequencies
    above ``modes`` are zeroed before the inverse transform.
    """
    xB, ci, n = x.shape
    kbins = n // 2 + 1
    if not 1 <= modes <= kbins:
        raise ValueError(f"modes={modes} out of range for n={n}")
    ci_w, co, m_w = w_real.shape
    if (ci_w, m_w) != (ci, modes) or w_imag.shape != w_real.shape:
        raise ShapeMismatchError("spectral weights do not match input/modes")
    wc = w_real.data + 1j * w_imag.data
    xf = np.fft.rfft(x.data, axis=-1)
    yf = np.zeros((xB, co, kbins), dtype=complex)
    yf[:, :, :modes] = np.einsum("bim,iom->bom", xf[:, :, :modes], wc)
    out = np.fft.irfft(yf, n, axis=-1)

    def backward(g):
        gy = _irfft_vjp_scale(np.fft.rfft(g, axis=-1), n)[..., :modes]
        if w_real.requires_grad or w_imag.requires_grad:
            gw = np.einsum("bim,bom->iom", np.conj(xf[:, :, :modes]), gy)
            if w_real.requires_grad:
                w_real._accumulate(gw.real)
            if w_imag.requires_grad:
                w_imag._accumulate(gw.imag)
        if x.requires_grad:
            gx_f = np.zeros((xB, ci, n), dtype=complex)
            gx_f[:, :, :modes] = np.einsum("bom,iom->bim", gy, np.conj(wc))
            x._accumulate(n * np.fft.ifft(gx_f, axis=-1).real)

    return Tensor._from_op(out, (x, w_real, w_imag), backward, "spectral1d")


def spectral_multiply_2d(x: Tensor, w_real: Tensor, w_imag: Tensor, modes) -> Tensor:
    """2-D spectral channel mixing on the low-frequency corner blocks.

    x is (batch, C_in, n1, n2); weights are (2, C_in, C_out, m1, m2) for the
    k1-positive and k1-negative blocks of the rfft2 layout.
    """
    m1, m2 = modes
    xB, ci, n1, n2 = x.shape
    k2 = n2 // 2 + 1
    if not (1 <= m1 <= n1 // 2 and 1 <= m2 <= k2):
        raise ValueError(f"modes {modes} out of range for grid {(n1, n2)}")
    wc = w_real.data + 1j * w_imag.data
    xf = np.fft.rfft2(x.data, axes=(-2, -1))
    yf = np.zeros((xB, wc.shape[2], n1, k2), dtype=complex)
    yf[:, :, :m1, :m2] = np.einsum("bixy,ioxy->boxy", xf[:, :, :m1, :m2], wc[0])
    yf[:, :, -m1:, :m2] = np.einsum("bixy,ioxy->boxy", xf[:, :, -m1:, :m2], wc[1])
    out = np.fft.irfft2(yf, s=(n1, n2), axes=(-2, -1))

    def backward(g):
        gy = np.fft.rfft2(g, axes=(-2, -1)) * (2.0 / (n1 * n2))
        gy[..., 0] *= 0.5
        if n2 % 2 == 0:
            gy[..., -1] *= 0.5
        blocks = (gy[:, :, :m1, :m2], gy[:, :, -m1:, :m2])
        xblocks = (xf[:, :, :m1, :m2], xf[:, :, -m1:, :m2])
        if w_real.requires_grad or w_imag.requires_grad:
            gw = np.stack(
                [
                    np.einsum("bixy,boxy->ioxy", np.conj(xb), gb)
                    for xb, gb in zip(xblocks, blocks)
                ]
            )
            if w_real.requires_grad:
                w_real._accumulate(gw.real)
            if w_imag.requires_grad:
                w_imag._accumulate(gw.imag)
        if x.requires_grad:
            gx_f = np.zeros((xB, ci, n1, n2), dtype=complex)
            gx_f[:, :, :m1, :m2] = np.einsum("boxy,ioxy->bixy", blocks[0], np.conj(wc[0]))
            gx_f[:, :, -m1:, :m2] += np.einsum("boxy,ioxy->bixy", blocks[1], np.conj(wc[1]))
            x._accumulate(n1 * n2 * np.fft.ifft2(gx_f, axes=(-2, -1)).real)

    return Tensor._from_op(out, (x, w_real, w_imag), backward, "spectral2d")


# -- optimizer ---------------------------------------------------------------


@dataclass
class AdamState:
    """Bias-corrected Adam moment accumulators for a fixed parameter list."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_init(params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    state = AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps)
    state.m = [np.zeros_like(p.data) for p in params]
    state.v = [np.zeros_like(p.data) for p in params]
    return state


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` entries may be None (treated as zero: parameter untouched).
    """
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    correction = state.lr * np.sqrt(1.0 - b2 ** t) / (1.0 - b1 ** t)
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeMismatchError(f"adam: grad {g.shape} vs param {p.data.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError("non-finite gradient in adam_step")
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= correction * m / (np.sqrt(v) + state.eps)


def zero_grads(params):
    for p in params:
        p.grad = None
