"""Parameter containers and the small set of layers the model is built from."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02


class Parameter(Tensor):
    """A trainable leaf tensor. ``decay`` marks it for AdamW weight decay."""

    __slots__ = ("decay",)

    def __init__(self, data, decay: bool = False):
        super().__init__(data, requires_grad=True)
        self.decay = decay


class Module:
    """Recursive container: attributes that are Parameters, Modules or lists of Modules."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if name == "buffers" and isinstance(value, dict):
                for key, arr in value.items():
                    yield f"{prefix}{key}", arr
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def normal(rng: np.random.Generator, shape, std: float = INIT_STD) -> np.ndarray:
    return rng.normal(0.0, std, size=shape)


class Linear(Module):
    def __init__(self, rng: np.random.Generator, d_in: int, d_out: int, bias: bool = True):
        self.weight = Parameter(normal(rng, (d_in, d_out)), decay=True)
        self.bias = Parameter(np.zeros(d_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        y = T.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.gain = Parameter(np.ones(dim))
        self.bias = Parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias, self.eps)


class MLP(Module):
    """layer norm -> linear -> GELU -> linear"""

    def __init__(self, rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int):
        self.norm = LayerNorm(d_in)
        self.fc1 = Linear(rng, d_in, d_hidden)
        self.fc2 = Linear(rng, d_hidden, d_out)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(self.norm(x))))


class Conv2d(Module):
    """Same-padded stride-1 convolution on B×H×W×C maps."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int, kernel: int = 3, bias: bool = True):
        if kernel not in (1, 3):
            raise ValueError("kernel must be 1 or 3")
        fan_in = c_in * kernel * kernel
        self.weight = Parameter(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kernel, kernel, c_in, c_out)), decay=True)
        self.bias = Parameter(np.zeros(c_out)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias)


class Deconv2x2(Module):
    """Transposed convolution with a 2×2 kernel and stride 2."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int):
        self.weight = Parameter(rng.normal(0.0, np.sqrt(1.0 / c_in), size=(c_in, 2, 2, c_out)), decay=True)
        self.bias = Parameter(np.zeros(c_out))

    def __call__(self, x: Tensor) -> Tensor:
        return T.deconv2d_2x2(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gain = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        dtype = T.get_default_dtype()
        self.buffers = {
            "running_mean": np.zeros(channels, dtype=dtype),
            "running_var": np.ones(channels, dtype=dtype),
        }
        self.momentum = momentum
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm_2d(x, self.gain, self.bias, self.buffers["running_mean"], self.buffers["running_var"],
                               self.training, self.momentum, self.eps)


class ConvBNReLU(Module):
    """3×3 convolution, batch normalisation, ReLU."""

    def __init__(self, rng: np.random.Generator, c_in: int, c_out: int):
        self.conv = Conv2d(rng, c_in, c_out, 3)
        self.bn = BatchNorm2d(c_out)

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))
