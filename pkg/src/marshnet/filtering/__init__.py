"""Removal of background patches: autoencoder embeddings clustered by 2-means."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..stain import DEFAULT_BETA
from ..tiling import resize_bilinear, tissue_ratio
from .autoencoder import (
    INPUT_SIZE,
    Autoencoder,
    embed,
    embed_batch,
    reconstruction_mse,
    train_autoencoder,
)
from .kmeans import KMeansResult, inertia, kmeans


def select_useful_cluster(result: KMeansResult, patches: Sequence[np.ndarray] | None = None, *,
                          ratios: Sequence[float] | None = None, beta: float = DEFAULT_BETA) -> int:
    """Index of the cluster whose members have the higher mean tissue ratio (ties -> 0)."""
    if len(result.centroids) != 2:
        raise ValueError("useful-cluster selection needs exactly two clusters")
    if ratios is None:
        if patches is None:
            raise ValueError("pass patches or precomputed tissue ratios")
        ratios = [tissue_ratio(p, beta) for p in patches]
    ratios = np.asarray(ratios, dtype=np.float64)
    means = []
    for c in (0, 1):
        members = ratios[result.labels == c]
        if members.size == 0:
            raise ValueError(f"cluster {c} is empty")
        means.append(members.mean())
    return 1 if means[1] > means[0] else 0


def filter_patches(model: Autoencoder, patches: Sequence[np.ndarray], seed: int = 0,
                   beta: float = DEFAULT_BETA) -> tuple[np.ndarray, KMeansResult]:
    """Boolean keep-mask over ``patches`` (any size; resized to the AE input)."""
    small = np.stack([resize_bilinear(p, INPUT_SIZE) for p in patches])
    codes = embed_batch(model, small)
    result = kmeans(codes, 2, seed=seed)
    useful = select_useful_cluster(result, ratios=[tissue_ratio(p, beta) for p in small])
    return result.labels == useful, result


__all__ = [
    "Autoencoder", "KMeansResult", "embed", "embed_batch", "filter_patches", "inertia", "kmeans",
    "reconstruction_mse", "select_useful_cluster", "train_autoencoder",
]
