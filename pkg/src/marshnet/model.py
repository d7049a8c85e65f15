"""Residual-network patch classifier for the four severity classes."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import labels
from . import rng as rng_mod
from .tensor import Tape, Tensor, backward, checkpoint, ops
from .tensor.module import BatchNorm2d, Conv2d, Dense, Module
from .tensor.optim import RMSprop

REFERENCE_LR = 1e-5
DESK_LR = 1e-3


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 64
    stem_channels: int = 16
    stages: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    head_width: int = 128
    dropout: float = 0.5
    n_classes: int = labels.N_CLASSES

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(int(c) for c in self.stages))
        if min((self.input_size, self.stem_channels, self.blocks_per_stage, self.head_width, *self.stages)) < 1:
            raise ValueError("model dimensions must be positive")
        if self.n_classes != labels.N_CLASSES:
            raise ValueError(f"class count must be {labels.N_CLASSES}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.input_size % (2 ** len(self.stages)):
            raise ValueError(f"input size {self.input_size} is not divisible by 2^{len(self.stages)} "
                             "(one stride-2 entry per stage)")

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        side = self.input_size // 2 ** len(self.stages)
        return self.stages[-1], side, side

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["stages"] = tuple(d["stages"])
        return cls(**d)


FULL_SCALE_FEATURES = (2048, 7, 7)
FULL_SCALE_HEAD_WIDTH = 1024


@dataclass(frozen=True)
class LayerRow:
    index: int
    kind: str
    output_shape: tuple[int, ...]
    params: int


def head_summary(feature_shape: tuple[int, int, int] = FULL_SCALE_FEATURES,
                 head_width: int = FULL_SCALE_HEAD_WIDTH, n_classes: int = labels.N_CLASSES,
                 first_index: int = 2) -> list[LayerRow]:
    """Flatten -> Dense(width) -> Dropout -> Dense(classes), with parameter counts."""
    flat = math.prod(feature_shape)
    return [
        LayerRow(first_index, "Flatten", (flat,), 0),
        LayerRow(first_index + 1, "Dense", (head_width,), flat * head_width + head_width),
        LayerRow(first_index + 2, "Dropout", (head_width,), 0),
        LayerRow(first_index + 3, "Dense", (n_classes,), head_width * n_classes + n_classes),
    ]


class ResidualBlock(Module):
    """relu(bn(conv(relu(bn(conv(x))))) + skip(x)); skip is identity or 1x1 conv + bn."""

    def __init__(self, cin: int, cout: int, stride: int, gen: np.random.Generator):
        self.conv1 = Conv2d(cin, cout, 3, stride, 1, gen, bias=False)
        self.bn1 = BatchNorm2d(cout)
        self.conv2 = Conv2d(cout, cout, 3, 1, 1, gen, bias=False)
        self.bn2 = BatchNorm2d(cout)
        if stride != 1 or cin != cout:
            self.proj = Conv2d(cin, cout, 1, stride, 0, gen, bias=False)
            self.proj_bn = BatchNorm2d(cout)
        else:
            self.proj = self.proj_bn = None

    def residual(self, x: Tensor, train: bool) -> Tensor:
        h = ops.relu(self.bn1(self.conv1(x), train))
        return self.bn2(self.conv2(h), train)

    def skip(self, x: Tensor, train: bool) -> Tensor:
        return x if self.proj is None else self.proj_bn(self.proj(x), train)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return ops.relu(ops.add(self.residual(x, train), self.skip(x, train)))


class Classifier(Module):
    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config
        gen = rng_mod.stream(seed, "init")
        self.stem = Conv2d(3, config.stem_channels, 3, 1, 1, gen, bias=False)
        self.stem_bn = BatchNorm2d(config.stem_channels)
        blocks = []
        cin = config.stem_channels
        for cout in config.stages:
            for b in range(config.blocks_per_stage):
                blocks.append(ResidualBlock(cin, cout, 2 if b == 0 else 1, gen))
                cin = cout
        self.blocks = blocks
        self.fc = Dense(math.prod(config.feature_shape), config.head_width, gen)
        self.out = Dense(config.head_width, config.n_classes, gen)
        # Small output weights: initial predictions are near uniform.
        self.out.weight.assign(self.out.weight.data * 0.01)
        # Explicit identity statistics so an untrained model runs in eval mode.
        for _, stats in self.named_buffers():
            stats.initialized = True

    def features(self, x: Tensor, train: bool = False) -> Tensor:
        """Activations of the last residual block (the Grad-CAM target layer)."""
        h = ops.relu(self.stem_bn(self.stem(x), train))
        for block in self.blocks:
            h = block(h, train)
        return h

    def head(self, feats: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        h = ops.relu(self.fc(ops.flatten(feats)))
        h = ops.dropout(h, self.config.dropout, train, rng)
        return self.out(h)

    def __call__(self, x: Tensor, train: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return self.head(self.features(x, train), train, rng)

    def summary(self) -> list[LayerRow]:
        backbone = self.param_count() - self.fc.weight.size - self.fc.bias.size - self.out.weight.size - self.out.bias.size
        c, h, w = self.config.feature_shape
        rows = [LayerRow(1, "Model", (h, w, c), backbone)]
        return rows + head_summary(self.config.feature_shape, self.config.head_width, self.config.n_classes)

    def arch(self) -> dict:
        d = asdict(self.config)
        d["stages"] = list(d["stages"])
        return {"kind": "classifier", "config": d}

    def save(self, path: str | Path, extra: dict | None = None) -> None:
        checkpoint.save(path, self, self.arch(), extra)

    @classmethod
    def load(cls, path: str | Path) -> "Classifier":
        header, tensors = checkpoint.load(path)
        arch = header["arch"]
        if arch.get("kind") != "classifier":
            raise ValueError(f"{path} is not a classifier checkpoint")
        model = cls(ModelConfig.from_dict(arch["config"]))
        checkpoint.restore(model, header, tensors)
        return model


def build_classifier(config: ModelConfig = ModelConfig(), seed: int = 0) -> Classifier:
    return Classifier(config, seed)


def to_input(images, size: int) -> np.ndarray:
    """(N, S, S, 3) uint8 -> (N, 3, S, S) floats centred on mid-gray."""
    arr = np.asarray(images)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1:] != (size, size, 3):
        raise ValueError(f"classifier expects {size}x{size} RGB patches, got {arr.shape[1:]}")
    return arr.transpose(0, 3, 1, 2).astype(np.float64) / 255.0 - 0.5


TRANSFORMS = ("identity", "hflip", "vflip", "rot180")


def apply_transform(image: np.ndarray, kind: int | str) -> np.ndarray:
    k = TRANSFORMS.index(kind) if isinstance(kind, str) else int(kind)
    if k == 1:
        return image[:, ::-1]
    if k == 2:
        return image[::-1]
    if k == 3:
        return image[::-1, ::-1]
    return image


def augment(image: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Identity, horizontal flip, vertical flip, or 180-degree rotation, uniformly."""
    image = np.asarray(image)
    if image.shape[0] != image.shape[1]:
        raise ValueError(f"augment needs a square image, got {image.shape[:2]}")
    return np.ascontiguousarray(apply_transform(image, rng.integers(len(TRANSFORMS))))


@dataclass
class EpochStats:
    epoch: int
    mean_loss: float
    train_acc: float


@dataclass
class TrainResult:
    model: Classifier
    history: list[EpochStats] = field(default_factory=list)


def evaluate_loss(model: Classifier, images, targets: Sequence[int], batch_size: int = 64) -> float:
    x = to_input(images, model.config.input_size)
    y = np.asarray(targets)
    total = 0.0
    for i in range(0, len(x), batch_size):
        logits = model(Tensor(x[i:i + batch_size]), train=False)
        total += ops.softmax_cross_entropy(logits, y[i:i + batch_size]).item() * len(logits.data)
    return total / len(x)


def train(model: Classifier, images, targets: Sequence[int], epochs: int = 30, batch_size: int = 32,
          seed: int = 0, lr: float = DESK_LR, log=None) -> TrainResult:
    """Mini-batch RMSprop on softmax cross-entropy with on-the-fly flips."""
    images = np.asarray(images)
    y = np.array([labels.index(int(t)) for t in targets], dtype=np.int64)
    if len(images) != len(y) or len(y) == 0:
        raise ValueError("need matching, non-empty images and labels")
    missing = sorted(set(range(labels.N_CLASSES)) - set(y.tolist()))
    if missing:
        raise ValueError(f"class(es) absent from training data: {', '.join(labels.name(m) for m in missing)}")
    size = model.config.input_size
    to_input(images[:1], size)  # validate shape early
    opt = RMSprop(lr=lr)
    params = model.parameters()
    shuffle = rng_mod.stream(seed, "shuffle")
    aug = rng_mod.stream(seed, "augment")
    drop = rng_mod.stream(seed, "dropout")
    result = TrainResult(model)
    for epoch in range(1, epochs + 1):
        order = shuffle.permutation(len(y))
        loss_sum, correct, seen = 0.0, 0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            if len(idx) < 2:
                continue  # batch statistics need more than one sample
            batch = np.stack([augment(images[i], aug) for i in idx])
            xb = Tensor(to_input(batch, size))
            with Tape() as tape:
                logits = model(xb, train=True, rng=drop)
                loss = ops.softmax_cross_entropy(logits, y[idx])
            opt.step(params, backward(tape, loss, params))
            loss_sum += loss.item() * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
            seen += len(idx)
        stats = EpochStats(epoch, loss_sum / seen, correct / seen)
        result.history.append(stats)
        if log is not None:
            log(stats)
    return result


def predict_logits(model: Classifier, images, batch_size: int = 64) -> np.ndarray:
    x = to_input(images, model.config.input_size)
    return np.concatenate([model(Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)])


def predict_proba(model: Classifier, image) -> np.ndarray:
    """Class probabilities for one patch (length 4) or a batch (N x 4), eval mode."""
    arr = np.asarray(image)
    single = arr.ndim == 3
    probs = ops.softmax(predict_logits(model, arr))
    return probs[0] if single else probs
