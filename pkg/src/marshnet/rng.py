"""Seedable random streams, one per purpose.

Every stochastic component draws from its own named stream so that, for
example, changing the dropout draws never perturbs weight initialization.
"""
from __future__ import annotations

import zlib

import numpy as np

PURPOSES = ("init", "dropout", "augment", "shuffle", "kmeans", "stain", "synth")


def _purpose_key(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    """Return a PCG64 generator for ``(seed, purpose, *extra)``.

    The same triple always produces the same sequence; distinct purposes
    give statistically independent sequences.
    """
    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_purpose_key(purpose), *extra))
    return np.random.Generator(np.random.PCG64(ss))


def split(seed: int, n: int, purpose: str = "split") -> list[int]:
    """Derive ``n`` child seeds from ``seed`` deterministically."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_purpose_key(purpose),))
    return [int(child.generate_state(1, dtype=np.uint64)[0] >> 1) for child in ss.spawn(n)]
