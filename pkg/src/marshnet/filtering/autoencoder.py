"""Convolutional autoencoder whose bottleneck embeds 64x64 patches."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import rng as rng_mod
from ..tensor import Tape, Tensor, backward, ops
from ..tensor import checkpoint
from ..tensor.module import Conv2d, Dense, Module
from ..tensor.optim import RMSprop

INPUT_SIZE = 64
EMBED_DIM = 64
MIN_PATCHES = 32


class Autoencoder(Module):
    """conv(3-8-16-32, stride 2) + dense bottleneck, mirrored with nearest upsampling."""

    def __init__(self, embed_dim: int = EMBED_DIM, seed: int = 0):
        gen = rng_mod.stream(seed, "init")
        self.embed_dim = embed_dim
        self.enc = [Conv2d(3, 8, 3, 2, 1, gen), Conv2d(8, 16, 3, 2, 1, gen), Conv2d(16, 32, 3, 2, 1, gen)]
        self.to_code = Dense(32 * 8 * 8, embed_dim, gen)
        self.from_code = Dense(embed_dim, 32 * 8 * 8, gen)
        self.dec = [Conv2d(32, 16, 3, 1, 1, gen), Conv2d(16, 8, 3, 1, 1, gen), Conv2d(8, 3, 3, 1, 1, gen)]
        # Small output layer: reconstructions start near the centred mean.
        self.dec[-1].weight.assign(self.dec[-1].weight.data * 0.1)

    def arch(self) -> dict:
        return {"kind": "autoencoder", "embed_dim": self.embed_dim, "input_size": INPUT_SIZE}

    def encode(self, x: Tensor) -> Tensor:
        for conv in self.enc:
            x = ops.relu(conv(x))
        return self.to_code(ops.flatten(x))

    def decode(self, code: Tensor) -> Tensor:
        x = ops.relu(self.from_code(code))
        x = ops.reshape(x, (code.shape[0], 32, 8, 8))
        for i, conv in enumerate(self.dec):
            x = conv(ops.upsample_nearest2x(x))
            if i < len(self.dec) - 1:
                x = ops.relu(x)
        return x

    def save(self, path: str | Path) -> None:
        checkpoint.save(path, self, self.arch())

    @classmethod
    def load(cls, path: str | Path) -> "Autoencoder":
        header, tensors = checkpoint.load(path)
        arch = header["arch"]
        if arch.get("kind") != "autoencoder":
            raise ValueError(f"{path} is not an autoencoder checkpoint")
        model = cls(arch["embed_dim"])
        checkpoint.restore(model, header, tensors)
        return model


def to_input(patches) -> np.ndarray:
    """(N, 64, 64, 3) uint8 -> (N, 3, 64, 64) floats centred on mid-gray, in [-0.5, 0.5]."""
    arr = np.asarray(patches)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.shape[1:] != (INPUT_SIZE, INPUT_SIZE, 3):
        raise ValueError(f"autoencoder expects {INPUT_SIZE}x{INPUT_SIZE} RGB patches, got {arr.shape[1:]}")
    return arr.transpose(0, 3, 1, 2).astype(np.float64) / 255.0 - 0.5


@dataclass
class AETrainResult:
    model: Autoencoder
    history: list[float] = field(default_factory=list)


def train_autoencoder(patches, epochs: int = 10, seed: int = 0, batch_size: int = 32, lr: float = 1e-3,
                      embed_dim: int = EMBED_DIM) -> AETrainResult:
    """Minimise reconstruction MSE with RMSprop; ``history`` holds per-epoch mean loss."""
    if len(patches) == 0:
        raise ValueError("no patches to train the autoencoder on")
    x_all = to_input(patches)
    if len(x_all) < MIN_PATCHES:
        raise ValueError(f"autoencoder training needs at least {MIN_PATCHES} patches, got {len(x_all)}")
    model = Autoencoder(embed_dim, seed)
    opt = RMSprop(lr=lr)
    params = model.parameters()
    shuffle = rng_mod.stream(seed, "shuffle")
    history = []
    for _ in range(epochs):
        order = shuffle.permutation(len(x_all))
        total = 0.0
        for start in range(0, len(order), batch_size):
            xb = x_all[order[start:start + batch_size]]
            with Tape() as tape:
                loss = ops.mse(model.decode(model.encode(Tensor(xb))), xb)
            opt.step(params, backward(tape, loss, params))
            total += loss.item() * len(xb)
        history.append(total / len(x_all))
    return AETrainResult(model, history)


def reconstruction_mse(model: Autoencoder, patches) -> float:
    x = to_input(patches)
    return float(((model.decode(model.encode(Tensor(x))).data - x) ** 2).mean())


def embed(model: Autoencoder, patch) -> np.ndarray:
    """Embedding vector of one 64x64 RGB patch (length ``embed_dim``)."""
    arr = np.asarray(patch)
    if arr.shape != (INPUT_SIZE, INPUT_SIZE, 3):
        raise ValueError(f"embed expects a {INPUT_SIZE}x{INPUT_SIZE}x3 patch, got {arr.shape}")
    return embed_batch(model, arr[None])[0]


def embed_batch(model: Autoencoder, patches, batch_size: int = 64) -> np.ndarray:
    x = to_input(patches)
    out = [model.encode(Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.embed_dim))
