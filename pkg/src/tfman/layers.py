"""Parameter containers: a tiny module system over ``tfman.tensor``."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Param, Tensor


class Module:
    """Base class; parameters and submodules are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Param]]:
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            yield from _walk(val, prefix + key)

    def parameters(self) -> list[Param]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self

    def zero_grad(self) -> None:
        T.zero_grads(self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(val, path: str):
    if isinstance(val, Param):
        yield path, val
    elif isinstance(val, Module):
        yield from val.named_parameters(path + ".")
    elif isinstance(val, (list, tuple)):
        for i, item in enumerate(val):
            yield from _walk(item, f"{path}.{i}")


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """LeCun-uniform: unit-variance weights relative to fan-in."""
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(T.default_dtype())


def zeros(shape) -> np.ndarray:
    return np.zeros(shape, dtype=T.default_dtype())


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: np.random.Generator,
                 stride: int = 1, padding: int | None = None, bias: bool = True):
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.weight = Param(uniform_fan_in(rng, (cout, cin, k, k), cin * k * k))
        self.bias = Param(zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class ConvTranspose2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, padding: int,
                 rng: np.random.Generator, bias: bool = True):
        self.stride = stride
        self.padding = padding
        self.weight = Param(uniform_fan_in(rng, (cin, cout, k, k), cout * k * k))
        self.bias = Param(zeros(cout)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding)


class PReLU(Module):
    def __init__(self, channels: int = 1, init: float = 0.25):
        self.slope = Param(np.full(channels, init, dtype=T.default_dtype()))

    def forward(self, x: Tensor) -> Tensor:
        return T.prelu(x, self.slope)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


class Identity(Module):
    def forward(self, x: Tensor) -> Tensor:
        return x
