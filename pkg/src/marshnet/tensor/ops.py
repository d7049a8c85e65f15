"""Differentiable layer primitives.

Every op computes its forward value with numpy and registers a
vector-Jacobian product on the active tape.  Convolutions build an
im2col matrix and reduce with a single matmul, so the order is fixed.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import Tensor, record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return record("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    x, y = a.data, b.data
    return record("mul", x * y, (a, b), lambda g: (_unbroadcast(g * y, a.shape), _unbroadcast(g * x, b.shape)))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return record("sum", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return record("mean", np.array(x.data.mean()), (x,), lambda g: (np.full(shape, g / n),))


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    return record("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(src),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Zero-padded 2-D cross-correlation, NCHW layout, kernel FCkk."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError("conv2d expects 4-d input and kernel")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ValueError(f"input has {c} channels but kernel expects {kc}")
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ValueError("kernel larger than padded input")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # im2col: rows are output pixels, columns are (channel, ky, kx)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = kernel.data.reshape(f, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)
    if bias is not None:
        if bias.shape != (f,):
            raise ValueError(f"bias shape {bias.shape} does not match {f} filters")
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gk = (gm.T @ cols).reshape(f, c, kh, kw)
        dcols = (gm @ kmat).reshape(n, ho, wo, c, kh, kw)
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + h, pad:pad + w] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return record("conv2d", out, inputs, lambda g: vjp(g)[: len(inputs)])


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense: cannot multiply {x.shape} by {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"dense: bias {bias.shape} does not match width {weight.shape[1]}")
    xa, wa = x.data, weight.data
    out = xa @ wa
    if bias is not None:
        out = out + bias.data

    def vjp(g):
        return g @ wa.T, xa.T @ g, g.sum(axis=0)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return record("dense", out, inputs, lambda g: vjp(g)[: len(inputs)])


@dataclass
class RunningStats:
    """Per-channel running mean/variance for batch normalization."""

    mean: np.ndarray
    var: np.ndarray
    initialized: bool = False

    @classmethod
    def zeros(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels))


def batchnorm(x: Tensor, gamma: Tensor, beta: Tensor, stats: RunningStats, train: bool,
              momentum: float = BN_MOMENTUM, eps: float = BN_EPS) -> Tensor:
    """Per-channel batch normalization over (N, H, W).

    In training mode the batch statistics (population variance) are used and
    ``stats`` is updated in place with exponential momentum.  Evaluation mode
    reads ``stats`` and refuses to run if they were never set.
    """
    n, c, h, w = x.shape
    xa = x.data
    gshape = (1, c, 1, 1)
    if train:
        m = n * h * w
        if m < 2:
            raise ValueError("batchnorm in train mode needs at least two values per channel")
        mu = xa.mean(axis=(0, 2, 3))
        var = xa.var(axis=(0, 2, 3))
        stats.mean = (1 - momentum) * stats.mean + momentum * mu
        stats.var = (1 - momentum) * stats.var + momentum * var
        stats.initialized = True
    else:
        if not stats.initialized:
            raise RuntimeError("batchnorm eval mode used before running statistics were set")
        mu, var = stats.mean, stats.var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xa - mu.reshape(gshape)) * inv.reshape(gshape)
    out = gamma.data.reshape(gshape) * xhat + beta.data.reshape(gshape)
    ga = gamma.data

    def vjp(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gxhat = g * ga.reshape(gshape)
        if train:
            m = n * h * w
            gx = (inv.reshape(gshape) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(gshape)
        return gx, ggamma, gbeta

    return record("batchnorm", out, (x, gamma, beta), vjp)


def maxpool2x2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 needs even spatial extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return record("maxpool2x2", out, (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))
    return record("global_avg_pool", out, (x,),
                  lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), (n, c, h, w)).copy(),))


def upsample_nearest2x(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    return record("upsample2x", out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


def dropout(x: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1/(1-p) so eval is identity."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in train mode needs an rng")
    scale = (rng.random(x.shape) >= p) / (1.0 - p)
    return record("dropout", x.data * scale, (x,), lambda g: (g * scale,))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(``logits``)."""
    z = logits.data
    n, c = z.shape
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(f"labels must lie in [0, {c})")
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logsum
    loss = -logp[np.arange(n), labels].mean()
    probs = np.exp(logp)

    def vjp(g):
        d = probs.copy()
        d[np.arange(n), labels] -= 1.0
        return (d * (g / n),)

    return record("softmax_xent", np.array(loss), (logits,), vjp)


def mse(x: Tensor, target: np.ndarray) -> Tensor:
    diff = x.data - target
    n = diff.size
    return record("mse", np.array((diff ** 2).mean()), (x,), lambda g: (diff * (2.0 * g / n),))
