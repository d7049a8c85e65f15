"""Minimal layer containers holding parameter tensors."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .core import Tensor


class Module:
    """Base class: parameters and buffers are discovered by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, "ops.RunningStats"]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, ops.RunningStats):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, stride: int, pad: int, rng: np.random.Generator,
                 bias: bool = True):
        if min(cin, cout, k, stride) < 1:
            raise ValueError("conv dimensions and stride must be positive")
        self.stride, self.pad = stride, pad
        self.weight = Tensor(he_normal(rng, (cout, cin, k, k), cin * k * k), requires_grad=True)
        self.bias = Tensor(np.zeros(cout), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.pad)


class Dense(Module):
    def __init__(self, din: int, dout: int, rng: np.random.Generator):
        self.weight = Tensor(he_normal(rng, (din, dout), din), requires_grad=True)
        self.bias = Tensor(np.zeros(dout), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.dense(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.stats = ops.RunningStats.zeros(channels)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return ops.batchnorm(x, self.gamma, self.beta, self.stats, train)
