"""Small layer library shared by the surrogate backbones and the policy net.

Parameters are float64 leaf tensors initialized from an explicit Philox
generator, so every model is reproducible from its seed.  Layers expose
``named_params(prefix)`` for checkpointing in a stable order.
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, conv1d, conv2d, spectral_multiply, spectral_multiply_2d


class Dense:
    def __init__(self, n_in: int, n_out: int, gen, zero_init: bool = False):
        if zero_init:
            w = np.zeros((n_in, n_out))
        else:
            w = gen.standard_normal((n_in, n_out)) * np.sqrt(1.0 / n_in)
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias

    def named_params(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class Conv1d:
    def __init__(self, c_in: int, c_out: int, kernel: int, gen,
                 padding: str = "zero", zero_init: bool = False):
        if zero_init:
            w = np.zeros((c_out, c_in, kernel))
        else:
            w = gen.standard_normal((c_out, c_in, kernel)) * np.sqrt(1.0 / (c_in * kernel))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, padding=self.padding)

    def named_params(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class Conv2d:
    def __init__(self, c_in: int, c_out: int, kernel: int, gen,
                 padding: str = "periodic", zero_init: bool = False):
        if zero_init:
            w = np.zeros((c_out, c_in, kernel, kernel))
        else:
            w = gen.standard_normal((c_out, c_in, kernel, kernel)) \
                * np.sqrt(1.0 / (c_in * kernel * kernel))
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(c_out), requires_grad=True)
        self.padding = padding

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, padding=self.padding)

    def named_params(self, prefix: str):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


class SpectralConv1d:
    def __init__(self, c_in: int, c_out: int, modes: int, gen):
        scale = np.sqrt(1.0 / (c_in * modes))
        self.w_real = Tensor(gen.standard_normal((c_in, c_out, modes)) * scale,
                             requires_grad=True)
        self.w_imag = Tensor(gen.standard_normal((c_in, c_out, modes)) * scale,
                             requires_grad=True)
        self.modes = modes

    def __call__(self, x: Tensor) -> Tensor:
        return spectral_multiply(x, self.w_real, self.w_imag, self.modes)

    def named_params(self, prefix: str):
        return [(f"{prefix}.w_real", self.w_real), (f"{prefix}.w_imag", self.w_imag)]


class SpectralConv2d:
    def __init__(self, c_in: int, c_out: int, modes, gen):
        m1, m2 = modes
        scale = np.sqrt(1.0 / (c_in * m1 * m2))
        shape = (2, c_in, c_out, m1, m2)
        self.w_real = Tensor(gen.standard_normal(shape) * scale, requires_grad=True)
        self.w_imag = Tensor(gen.standard_normal(shape) * scale, requires_grad=True)
        self.modes = (m1, m2)

    def __call__(self, x: Tensor) -> Tensor:
        return spectral_multiply_2d(x, self.w_real, self.w_imag, self.modes)

    def named_params(self, prefix: str):
        return [(f"{prefix}.w_real", self.w_real), (f"{prefix}.w_imag", self.w_imag)]
