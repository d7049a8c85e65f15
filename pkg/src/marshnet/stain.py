"""Stain separation and normalization by sparse non-negative factorization.

Pixels are mapped to optical density (OD) space, where H&E mixing is
linear: each tissue pixel's OD vector ``v`` is approximated by ``W @ h``
with ``W`` a 3x2 matrix of unit-norm stain directions and ``h >= 0`` a
sparse concentration vector.  A profile fitted on a reference patch is the
normalization target; every other patch is re-expressed in its stains.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rng as rng_mod
from .io import atomic_write_text

DEFAULT_LAMBDA = 0.1
CONCENTRATION_LAMBDA = 0.01
DEFAULT_BETA = 0.15
DEFAULT_ITERS = 200
MAX_FIT_PIXELS = 20_000
MIN_TISSUE_PIXELS = 100
OD_MAX = math.log(255.0)


class StainError(ValueError):
    pass


def rgb_to_od(image: np.ndarray) -> np.ndarray:
    """Beer-Lambert optical density, ``-ln(max(I, 1) / 255)``, same shape as input."""
    img = np.asarray(image, dtype=np.float64)
    return -np.log(np.maximum(img, 1.0) / 255.0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(255.0 * np.exp(-np.asarray(od, dtype=np.float64))), 0, 255).astype(np.uint8)


def od_norm(image: np.ndarray) -> np.ndarray:
    """Per-pixel Euclidean norm of the OD vector, shape ``image.shape[:-1]``."""
    return np.linalg.norm(rgb_to_od(image), axis=-1)


@dataclass(frozen=True)
class StainProfile:
    """Stain directions (columns of ``W``: hematoxylin, eosin) and 99th-percentile concentrations."""

    W: np.ndarray
    p99: np.ndarray

    def __post_init__(self):
        W = np.array(self.W, dtype=np.float64)
        p99 = np.array(self.p99, dtype=np.float64)
        if W.shape != (3, 2) or p99.shape != (2,):
            raise ValueError("stain profile needs W of shape (3, 2) and p99 of length 2")
        if (W < 0).any() or (p99 < 0).any():
            raise ValueError("stain profile entries must be non-negative")
        if not np.allclose(np.linalg.norm(W, axis=0), 1.0, atol=1e-6):
            raise ValueError("stain directions must have unit norm")
        W.flags.writeable = False
        p99.flags.writeable = False
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "p99", p99)

    def to_json(self) -> str:
        return json.dumps({"W": self.W.tolist(), "p99": self.p99.tolist()}, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "StainProfile":
        obj = json.loads(text)
        return cls(np.array(obj["W"]), np.array(obj["p99"]))

    def save(self, path: str | Path) -> None:
        atomic_write_text(Path(path), self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "StainProfile":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"file not found: {path}")
        return cls.from_json(path.read_text())


def lasso_objective(V: np.ndarray, W: np.ndarray, H: np.ndarray, lam: float) -> np.ndarray:
    """Per-pixel ``0.5*||v - W h||^2 + lam*sum(h)``; ``V`` is (n, 3), ``H`` is (2, n)."""
    r = V - (W @ H).T
    return 0.5 * np.einsum("ij,ij->i", r, r) + lam * H.sum(axis=0)


def solve_concentrations(V: np.ndarray, W: np.ndarray, lam: float = CONCENTRATION_LAMBDA) -> np.ndarray:
    """Exact per-pixel non-negative lasso for two stains.

    The minimiser lies in the interior or on one face of the non-negative
    quadrant, so it is the best of four closed-form candidates: both
    active, only stain 0, only stain 1, or zero.  Returns ``H`` (2, n).
    """
    V = np.asarray(V, dtype=np.float64).reshape(-1, 3)
    W = np.asarray(W, dtype=np.float64)
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    n = V.shape[0]
    G = W.T @ W
    b = V @ W - lam  # (n, 2)
    cands = [np.zeros((2, n))]
    for k in range(2):
        h = np.zeros((2, n))
        if G[k, k] > 0:
            h[k] = np.maximum(b[:, k] / G[k, k], 0.0)
        cands.append(h)
    det = G[0, 0] * G[1, 1] - G[0, 1] ** 2
    if det > 1e-12 * max(G[0, 0] * G[1, 1], 1e-300):
        both = np.linalg.solve(G, b.T)
        both[:, (both < 0).any(axis=0)] = 0.0
        cands.append(both)
    objs = np.stack([lasso_objective(V, W, h, lam) for h in cands])
    best = objs.argmin(axis=0)
    return np.stack(cands)[best, :, np.arange(n)].T.copy()


def _normalize_columns(W: np.ndarray) -> np.ndarray | None:
    norms = np.linalg.norm(W, axis=0)
    if (norms <= 1e-12).any():
        return None
    return W / norms


def _initial_directions(V: np.ndarray) -> np.ndarray:
    """Extreme-angle OD directions in the dominant 2-D subspace."""
    _, _, vt = np.linalg.svd(V, full_matrices=False)
    basis = vt[:2].T  # (3, 2)
    basis *= np.where(basis.sum(axis=0) < 0, -1.0, 1.0)
    proj = V @ basis
    angles = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(angles, [1, 99])
    W = np.stack([basis @ [math.cos(a), math.sin(a)] for a in (lo, hi)], axis=1)
    W = np.maximum(W, 0.0)
    fixed = _normalize_columns(W)
    if fixed is None:
        mean_dir = np.maximum(V.mean(axis=0), 1e-6)
        fixed = np.stack([mean_dir, mean_dir], axis=1) / np.linalg.norm(mean_dir)
    return fixed


@dataclass
class StainFit:
    profile: StainProfile
    objective: list[float] = field(default_factory=list)
    converged: bool = False
    n_pixels: int = 0


def _objective(V, W, H, lam) -> float:
    R = V.T - W @ H
    return 0.5 * float(np.sum(R * R)) + lam * float(H.sum())


def _h_step(V, W, H, lam, step, inner=5):
    """Proximal gradient with backtracking on the concentrations."""
    VT = V.T
    for _ in range(inner):
        R = W @ H - VT
        grad = W.T @ R
        smooth = 0.5 * float(np.sum(R * R))
        t = step * 2.0
        while True:
            Hn = np.maximum(H - t * (grad + lam), 0.0)
            D = Hn - H
            Rn = W @ Hn - VT
            if 0.5 * float(np.sum(Rn * Rn)) <= smooth + float(np.sum(grad * D)) + float(np.sum(D * D)) / (2 * t) + 1e-12:
                break
            t *= 0.5
            if t < 1e-12:
                return H, step
        H, step = Hn, t
    return H, step


def _w_step(V, W, H, lam, step):
    """Projected gradient on the stain matrix, renormalised, accepted only on descent."""
    base = _objective(V, W, H, lam)
    grad = (W @ H - V.T) @ H.T
    t = step * 2.0
    for _ in range(40):
        cand = _normalize_columns(np.maximum(W - t * grad, 0.0))
        if cand is not None and _objective(V, cand, H, lam) <= base:
            return cand, t
        t *= 0.5
    return W, step


def fit_stain(image: np.ndarray, lam: float = DEFAULT_LAMBDA, iters: int = DEFAULT_ITERS, seed: int = 0,
              beta: float = DEFAULT_BETA, max_pixels: int = MAX_FIT_PIXELS, tol: float = 1e-7) -> StainFit:
    """Fit a stain profile to the tissue pixels of ``image`` (or an (n, 3) OD matrix)."""
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        V = rgb_to_od(arr).reshape(-1, 3)
    else:
        V = np.asarray(arr, dtype=np.float64).reshape(-1, 3)
    V = V[np.linalg.norm(V, axis=1) > beta]
    if V.shape[0] < MIN_TISSUE_PIXELS:
        raise StainError(f"insufficient tissue: {V.shape[0]} pixels above OD {beta}")
    if V.shape[0] > max_pixels:
        pick = rng_mod.stream(seed, "stain").choice(V.shape[0], size=max_pixels, replace=False)
        V = V[np.sort(pick)]

    W = _initial_directions(V)
    H = solve_concentrations(V, W, lam)
    history = [_objective(V, W, H, lam)]
    best = (history[0], W, H)
    h_step = w_step = 1.0
    converged = False
    for _ in range(iters):
        H, h_step = _h_step(V, W, H, lam, h_step)
        W, w_step = _w_step(V, W, H, lam, w_step)
        obj = _objective(V, W, H, lam)
        history.append(obj)
        if obj < best[0]:
            best = (obj, W, H)
        if history[-2] - obj <= tol * max(abs(history[-2]), 1.0):
            converged = True
            break
    _, W, H = best
    if W[0, 0] < W[0, 1]:
        W, H = W[:, ::-1], H[::-1]
    p99 = np.percentile(H, 99, axis=1)
    return StainFit(StainProfile(W, p99), history, converged, V.shape[0])


def fit_stain_profile(image: np.ndarray, lam: float = DEFAULT_LAMBDA, iters: int = DEFAULT_ITERS,
                      seed: int = 0, beta: float = DEFAULT_BETA) -> StainProfile:
    fit = fit_stain(image, lam=lam, iters=iters, seed=seed, beta=beta)
    if not fit.converged:
        warnings.warn(f"stain fit did not converge in {iters} iterations; returning best iterate",
                      RuntimeWarning, stacklevel=2)
    return fit.profile


def normalize_patch(image: np.ndarray, source: StainProfile, target: StainProfile,
                    lam: float = CONCENTRATION_LAMBDA, beta: float = DEFAULT_BETA) -> np.ndarray:
    """Re-render ``image`` with the target's stain directions and concentration scale.

    Background pixels (OD norm <= ``beta``) are copied through unchanged.
    """
    if (source.p99 <= 0).any():
        raise StainError("degenerate stain: source profile has a zero 99th-percentile concentration")
    img = np.asarray(image, dtype=np.uint8)
    od = rgb_to_od(img).reshape(-1, 3)
    mask = np.linalg.norm(od, axis=1) > beta
    out = img.reshape(-1, 3).copy()
    if mask.any():
        H = solve_concentrations(od[mask], source.W, lam)
        H *= (target.p99 / source.p99)[:, None]
        out[mask] = od_to_rgb((target.W @ H).T)
    return out.reshape(img.shape)
