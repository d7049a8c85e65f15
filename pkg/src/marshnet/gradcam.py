"""Grad-CAM heatmaps over the last residual block, plus overlay and occlusion helpers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import labels
from .tensor import Tape, Tensor, backward, ops
from .tiling import resize_bilinear

BLUE = np.array([0.0, 0.0, 255.0])


@dataclass
class Heatmap:
    values: np.ndarray
    target: int
    patch_id: str = ""


def _model_input(model, patch: np.ndarray) -> np.ndarray:
    size = model.config.input_size
    img = np.asarray(patch)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) patch, got shape {img.shape}")
    if img.shape[:2] != (size, size):
        img = resize_bilinear(img, size)
    return img.transpose(2, 0, 1)[None].astype(np.float64) / 255.0 - 0.5


def class_activation(model, patch: np.ndarray, target: int) -> np.ndarray:
    """Raw relu(sum_k alpha_k A^k) at feature-map resolution."""
    if not callable(getattr(model, "features", None)) or not callable(getattr(model, "head", None)):
        raise TypeError("Grad-CAM needs a model exposing convolutional features() and head()")
    target = labels.index(target)
    x = Tensor(_model_input(model, patch), requires_grad=True)
    with Tape() as tape:
        feats = model.features(x, train=False)
        logits = model.head(feats, train=False)
        picked = ops.sum(ops.mul(logits, Tensor(np.eye(labels.N_CLASSES)[target][None])))
    if feats.data.ndim != 4:
        raise TypeError("features() must return an (N, C, H, W) activation map")
    grad = backward(tape, picked, [feats])[feats][0]
    alphas = grad.mean(axis=(1, 2))
    return np.maximum(np.tensordot(alphas, feats.data[0], axes=1), 0.0)


def gradcam(model, patch: np.ndarray, target_class: int | str, patch_id: str = "") -> Heatmap:
    """Heatmap in [0, 1] at the patch's own resolution; an all-zero map stays zero."""
    raw = class_activation(model, patch, labels.index(target_class))
    h, w = np.asarray(patch).shape[:2]
    up = np.maximum(resize_bilinear(raw, (h, w)), 0.0)
    lo, hi = up.min(), up.max()
    values = (up - lo) / (hi - lo) if hi > lo else np.zeros_like(up)
    return Heatmap(values, labels.index(target_class), patch_id)


def overlay(patch: np.ndarray, heatmap: np.ndarray | Heatmap, alpha: float = 0.5) -> np.ndarray:
    """out = (1 - alpha*h) * pixel + alpha*h * blue, rounded to uint8."""
    h = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    img = np.asarray(patch)
    if img.shape[:2] != h.shape:
        raise ValueError(f"heatmap {h.shape} does not match patch {img.shape[:2]}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    a = (alpha * np.clip(h, 0.0, 1.0))[..., None]
    out = (1.0 - a) * img.astype(np.float64) + a * BLUE
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def top_decile_mask(values: np.ndarray) -> np.ndarray:
    """The highest-scoring tenth of pixels (stable order breaks ties)."""
    flat = values.ravel()
    k = max(1, int(round(0.1 * flat.size)))
    idx = np.argsort(-flat, kind="stable")[:k]
    mask = np.zeros(flat.size, dtype=bool)
    mask[idx] = True
    return mask.reshape(values.shape)


def occlusion_trial(model, patch: np.ndarray, target: int, gen: np.random.Generator,
                    fill: int = 255) -> tuple[float, float]:
    """Probability drop when masking the top-decile heat region vs an equal-area shifted copy.

    The control mask is the same region cyclically shifted by a random
    offset, so shape and area match exactly.
    """
    from .model import predict_proba

    size = model.config.input_size
    img = np.asarray(patch)
    if img.shape[:2] != (size, size):
        img = resize_bilinear(img, size)
    heat = gradcam(model, img, target)
    mask = top_decile_mask(heat.values)
    dy, dx = (int(v) for v in gen.integers(size // 4, size - size // 4, 2))
    control = np.roll(mask, (dy, dx), axis=(0, 1))
    base = predict_proba(model, img)[target]
    hot, rand = img.copy(), img.copy()
    hot[mask] = fill
    rand[control] = fill
    probs = predict_proba(model, np.stack([hot, rand]))
    return float(base - probs[0, target]), float(base - probs[1, target])
