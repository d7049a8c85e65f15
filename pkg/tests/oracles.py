"""Independent reference implementations used as test oracles."""
import itertools
from types import SimpleNamespace

import numpy as np

from marshnet.tensor import Tape, Tensor, backward, ops
from marshnet.tensor.ops import RunningStats


def conv2d_loop(x, k, b, stride=1, pad=0):
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho, wo = (h + 2 * pad - kh) // stride + 1, (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, f, ho, wo))
    for i in range(n):
        for o in range(f):
            for r in range(ho):
                for s in range(wo):
                    acc = b[o]
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[i, ch, r * stride + u, s * stride + v] * k[o, ch, u, v]
                    out[i, o, r, s] = acc
    return out


def dense_loop(x, w, b):
    out = np.zeros((x.shape[0], w.shape[1]))
    for i in range(x.shape[0]):
        for j in range(w.shape[1]):
            out[i, j] = b[j] + sum(x[i, d] * w[d, j] for d in range(x.shape[0 + 1]))
    return out


def numeric_grad(f, arrays, which, h=1e-5):
    base = [a.copy() for a in arrays]
    grad = np.zeros_like(base[which])
    for idx in np.ndindex(grad.shape):
        plus = [a.copy() for a in base]
        minus = [a.copy() for a in base]
        plus[which][idx] += h
        minus[which][idx] -= h
        fp = f([Tensor(a) for a in plus]).item()
        fm = f([Tensor(a) for a in minus]).item()
        grad[idx] = (fp - fm) / (2 * h)
    return grad


def grad_check(f, arrays, h=1e-5) -> float:
    """Largest norm-wise relative error between taped and central-difference gradients."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = f(tensors)
    grads = backward(tape, loss, tensors)
    worst = 0.0
    for i, t in enumerate(tensors):
        num = numeric_grad(f, arrays, i, h)
        ana = grads[t]
        denom = max(np.linalg.norm(ana), np.linalg.norm(num), 1e-12)
        worst = max(worst, float(np.linalg.norm(ana - num) / denom))
    return worst


def module_grad_check(loss_fn, params, h=1e-5, max_entries=None, rng=None) -> float:
    """Relative error for module parameters, perturbing them in place via ``assign``."""
    with Tape() as tape:
        loss = loss_fn()
    grads = backward(tape, loss, params)
    worst = 0.0
    for p in params:
        ana = grads[p]
        base = p.data.copy()
        idxs = list(np.ndindex(base.shape))
        if max_entries is not None and len(idxs) > max_entries:
            pick = (rng or np.random.default_rng(0)).choice(len(idxs), max_entries, replace=False)
            idxs = [idxs[i] for i in pick]
        num, sel = [], []
        for idx in idxs:
            for sign, store in ((1, "p"), (-1, "m")):
                pert = base.copy()
                pert[idx] += sign * h
                p.assign(pert)
                val = loss_fn().item()
                if store == "p":
                    fp = val
                else:
                    fm = val
            p.assign(base)
            num.append((fp - fm) / (2 * h))
            sel.append(ana[idx])
        num, sel = np.array(num), np.array(sel)
        denom = max(np.linalg.norm(sel), np.linalg.norm(num), 1e-12)
        worst = max(worst, float(np.linalg.norm(sel - num) / denom))
    return worst


def best_two_partition_inertia(points):
    """Exhaustive optimum of 2-means: every non-trivial bipartition."""
    n = len(points)
    best = np.inf
    for mask in itertools.product((0, 1), repeat=n - 1):
        labels = np.array((0,) + mask)
        if labels.min() == labels.max():
            continue
        total = 0.0
        for c in (0, 1):
            pts = points[labels == c]
            total += ((pts - pts.mean(axis=0)) ** 2).sum()
        best = min(best, total)
    return best


def bilinear_pixel(img, th, tw, r, c):
    """Direct half-pixel-centre bilinear sample of output pixel (r, c)."""
    h, w = img.shape[:2]
    sy = min(max((r + 0.5) * h / th - 0.5, 0.0), h - 1)
    sx = min(max((c + 0.5) * w / tw - 0.5, 0.0), w - 1)
    y0, x0 = int(np.floor(sy)), int(np.floor(sx))
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    fy, fx = sy - y0, sx - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


H_DIR = np.array([0.65, 0.70, 0.29])
E_DIR = np.array([0.07, 0.99, 0.11])


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def two_stain_image(seed=0, size=96, s1=H_DIR, s2=E_DIR, background=0.2):
    """uint8 image whose tissue OD is c1*s1 + c2*s2 with sparse non-negative c; some pixels white."""
    g = np.random.default_rng(seed)
    n = size * size
    c = g.uniform(0.0, 1.5, (n, 2))
    which = g.integers(0, 3, n)  # 0: only s1, 1: only s2, 2: mixture
    c[which == 0, 1] = 0.0
    c[which == 1, 0] = 0.0
    od = c @ np.stack([unit(s1), unit(s2)])
    od[g.random(n) < background] = 0.0
    rgb = np.clip(np.rint(255.0 * np.exp(-od)), 0, 255).astype(np.uint8)
    return rgb.reshape(size, size, 3)


def lasso_grid_min(v, W, lam, hi=4.0, step=1e-3):
    """Dense grid search of 0.5||v - W h||^2 + lam*|h|_1 over h in [0, hi]^2."""
    grid = np.arange(0.0, hi + step / 2, step)
    G = W.T @ W
    b = W.T @ v
    h0, h1 = grid[:, None], grid[None, :]
    obj = (0.5 * (G[0, 0] * h0 * h0 + 2 * G[0, 1] * h0 * h1 + G[1, 1] * h1 * h1)
           - b[0] * h0 - b[1] * h1 + lam * (h0 + h1) + 0.5 * float(v @ v))
    i, j = np.unravel_index(np.argmin(obj), obj.shape)
    return float(obj[i, j]), np.array([grid[i], grid[j]])


def op_gradcheck_cases(seed):
    """Scalar-valued functions covering every layer type, keyed by name."""
    g = np.random.default_rng(seed)
    x4 = g.normal(size=(2, 2, 4, 4))
    k, b = g.normal(size=(3, 2, 3, 3)), g.normal(size=3)
    gamma, beta = g.normal(size=2) + 1.5, g.normal(size=2)
    w, wb, x2 = g.normal(size=(8, 3)), g.normal(size=3), g.normal(size=(2, 8))
    y = g.integers(0, 3, size=2)
    # fixed random projections turn each op's output into a scalar
    r_conv, r_x4 = Tensor(g.normal(size=(2, 3, 2, 2))), Tensor(g.normal(size=x4.shape))
    r_pool, r_gap = Tensor(g.normal(size=(2, 2, 2, 2))), Tensor(g.normal(size=(2, 2)))
    r_up = Tensor(g.normal(size=(2, 2, 8, 8)))
    mask_seed = int(g.integers(2**31))

    def proj(t, r):
        return ops.sum(ops.mul(t, r))

    return {
        "conv": (lambda t: proj(ops.conv2d(t[0], t[1], t[2], stride=2, pad=1), r_conv), [x4, k, b]),
        "batchnorm": (lambda t: proj(ops.batchnorm(t[0], t[1], t[2], RunningStats.zeros(2), True), r_x4),
                      [x4, gamma, beta]),
        "maxpool": (lambda t: proj(ops.maxpool2x2(t[0]), r_pool), [x4]),
        "gap": (lambda t: proj(ops.global_avg_pool(t[0]), r_gap), [x4]),
        "upsample": (lambda t: proj(ops.upsample_nearest2x(t[0]), r_up), [x4]),
        "relu": (lambda t: proj(ops.relu(t[0]), r_x4), [x4]),
        "dropout": (lambda t: proj(ops.dropout(t[0], 0.5, True, np.random.default_rng(mask_seed)), r_x4), [x4]),
        "reshape": (lambda t: proj(ops.reshape(ops.flatten(t[0]), x4.shape), r_x4), [x4]),
        "dense_ce": (lambda t: ops.softmax_cross_entropy(ops.dense(t[0], t[1], t[2]), y), [x2, w, wb]),
        "mse": (lambda t: ops.mse(t[0], np.ones(x4.shape)), [x4]),
        "mean_add": (lambda t: ops.mean(ops.add(t[0], t[1])), [x4, g.normal(size=(1, 2, 1, 1))]),
    }


class OneMapNet:
    """Fixed conv features; logit ``c`` is the global mean of map ``k``, other logits use random maps."""

    def __init__(self, size=16, k=2, c=1, shift=0.0, seed=0):
        g = np.random.default_rng(seed)
        self.config = SimpleNamespace(input_size=size)
        self.kernel = Tensor(g.normal(size=(4, 3, 3, 3)))
        w = g.normal(size=(4, 4))
        w[:, c] = 0.0
        w[k, c] = 1.0
        self.weight = Tensor(w)
        self.bias = Tensor(np.full(4, shift))

    def features(self, x, train=False):
        return ops.conv2d(x, self.kernel, None, 1, 1)

    def head(self, feats, train=False):
        return ops.dense(ops.global_avg_pool(feats), self.weight, self.bias)
