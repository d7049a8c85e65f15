"""RMSprop without momentum."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .core import Tensor


@dataclass
class RMSprop:
    """Squared-gradient accumulator per parameter.

    ``s <- rho*s + (1-rho)*g**2``; ``theta <- theta - lr*g/(sqrt(s)+eps)``.
    """

    lr: float = 1e-5
    rho: float = 0.9
    eps: float = 1e-8
    state: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if self.eps < 0:
            raise ValueError("eps must be non-negative")

    def accumulator(self, param: Tensor) -> np.ndarray:
        return self.state.get(id(param), np.zeros_like(param.data))

    def step(self, params: Sequence[Tensor], grads: Mapping[Tensor, np.ndarray]) -> None:
        for p in params:
            g = grads[p]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            s = self.rho * self.accumulator(p) + (1.0 - self.rho) * g * g
            self.state[id(p)] = s
            if self.lr == 0.0:
                continue
            p.assign(p.data - self.lr * g / (np.sqrt(s) + self.eps))


def rmsprop_step(params: Sequence[Tensor], grads: Mapping[Tensor, np.ndarray], state: RMSprop) -> None:
    state.step(params, grads)
