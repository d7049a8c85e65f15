import math

import numpy as np
import pytest

from marshnet.tensor import (
    RMSprop,
    RunningStats,
    Tape,
    Tensor,
    backward,
    batchnorm,
    checkpoint,
    conv2d,
    dense,
    dropout,
    global_avg_pool,
    maxpool2x2,
    mean,
    mul,
    relu,
    rmsprop_step,
    softmax,
    softmax_cross_entropy,
)
from marshnet.tensor import ops
from marshnet.tensor.module import BatchNorm2d, Conv2d, Dense, Module

from .oracles import conv2d_loop, dense_loop, grad_check, op_gradcheck_cases


def P(a):
    return Tensor(a, requires_grad=True)


# ---------------------------------------------------------------- conv2d

def test_conv_all_ones():
    out = conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor([0.0]))
    assert out.shape == (1, 1, 1, 1) and out.item() == 9.0


def test_conv_identity_kernel():
    x = np.random.default_rng(0).normal(size=(2, 1, 5, 4))
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor([0.0]))
    assert np.array_equal(out.data, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
def test_conv_matches_loop_oracle(stride, pad):
    g = np.random.default_rng(stride * 10 + pad)
    x, k, b = g.normal(size=(1, 2, 5, 5)), g.normal(size=(3, 2, 3, 3)), g.normal(size=3)
    out = conv2d(Tensor(x), Tensor(k), Tensor(b), stride=stride, pad=pad)
    ref = conv2d_loop(x, k, b, stride, pad)
    assert out.shape == ref.shape
    assert np.max(np.abs(out.data - ref)) < 1e-12


def test_conv_output_extent():
    out = conv2d(Tensor(np.zeros((1, 1, 7, 6))), Tensor(np.zeros((2, 1, 3, 2))), stride=2, pad=1)
    assert out.shape == (1, 2, (7 + 2 - 3) // 2 + 1, (6 + 2 - 2) // 2 + 1)


def test_conv_errors():
    with pytest.raises(ValueError, match="channels"):
        conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError, match="stride"):
        conv2d(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 3, 3))), stride=0)
    with pytest.raises(ValueError, match="kernel larger"):
        conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# ---------------------------------------------------------------- dense

def test_dense_identity_and_bias():
    x = np.random.default_rng(1).normal(size=(3, 4))
    assert np.array_equal(dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4))).data, x)
    b = np.array([1.0, -2.0, 3.0])
    out = dense(Tensor(x), Tensor(np.zeros((4, 3))), Tensor(b)).data
    assert all(np.array_equal(row, b) for row in out)


def test_dense_matches_loop_oracle():
    g = np.random.default_rng(2)
    x, w, b = g.normal(size=(2, 3)), g.normal(size=(3, 4)), g.normal(size=4)
    assert np.max(np.abs(dense(Tensor(x), Tensor(w), Tensor(b)).data - dense_loop(x, w, b))) < 1e-12


def test_dense_dimension_mismatch():
    with pytest.raises(ValueError):
        dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


# ---------------------------------------------------------------- batchnorm

def test_batchnorm_standard_input_passes_through():
    x = np.random.default_rng(3).normal(size=(4, 1, 5, 5))
    x = (x - x.mean()) / x.std()
    out = batchnorm(Tensor(x), Tensor([1.0]), Tensor([0.0]), RunningStats.zeros(1), train=True)
    assert np.allclose(out.data, x / math.sqrt(1 + ops.BN_EPS), atol=1e-12)


def test_batchnorm_constant_channel_gives_beta():
    out = batchnorm(Tensor(np.full((2, 1, 3, 3), 7.0)), Tensor([2.0]), Tensor([0.25]), RunningStats.zeros(1), True)
    assert np.allclose(out.data, 0.25)


def test_batchnorm_running_mean_update():
    stats = RunningStats.zeros(1)
    batchnorm(Tensor(np.full((2, 1, 2, 2), 2.0)), Tensor([1.0]), Tensor([0.0]), stats, train=True)
    assert stats.mean[0] == pytest.approx(0.2)
    assert stats.var[0] == pytest.approx(0.9)


def test_batchnorm_eval_requires_stats():
    with pytest.raises(RuntimeError):
        batchnorm(Tensor(np.zeros((1, 1, 2, 2))), Tensor([1.0]), Tensor([0.0]), RunningStats.zeros(1), train=False)
    stats = RunningStats(np.array([1.0]), np.array([4.0]), initialized=True)
    out = batchnorm(Tensor(np.full((1, 1, 1, 1), 3.0)), Tensor([1.0]), Tensor([0.0]), stats, train=False)
    assert out.item() == pytest.approx(2.0 / math.sqrt(4.0 + ops.BN_EPS))


def test_batchnorm_needs_two_values():
    with pytest.raises(ValueError):
        batchnorm(Tensor(np.zeros((1, 1, 1, 1))), Tensor([1.0]), Tensor([0.0]), RunningStats.zeros(1), train=True)


# ---------------------------------------------------------------- pooling, relu, dropout

def test_relu_pool_examples():
    assert relu(Tensor([-1.0, 0.0, 2.0])).data.tolist() == [0.0, 0.0, 2.0]
    assert maxpool2x2(Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])).data.tolist() == [[[[4.0]]]]
    assert global_avg_pool(Tensor(np.full((1, 1, 3, 3), 5.0))).data.tolist() == [[5.0]]


def test_maxpool_odd_extent_errors():
    with pytest.raises(ValueError):
        maxpool2x2(Tensor(np.zeros((1, 1, 3, 4))))


def test_dropout_modes():
    x = Tensor(np.ones(100))
    g = np.random.default_rng(0)
    assert dropout(x, 0.0, True, g) is x
    assert dropout(x, 0.5, False) is x
    with pytest.raises(ValueError):
        dropout(x, 1.0, True, g)


def test_dropout_expectation():
    out = dropout(Tensor(np.ones(100_000)), 0.5, True, np.random.default_rng(4)).data
    assert 0.98 <= out.mean() <= 1.02
    assert set(np.unique(out)) <= {0.0, 2.0}


def test_dropout_masks_are_seed_reproducible():
    a = dropout(Tensor(np.ones(64)), 0.5, True, np.random.default_rng(9)).data
    b = dropout(Tensor(np.ones(64)), 0.5, True, np.random.default_rng(9)).data
    assert np.array_equal(a, b)


# ---------------------------------------------------------------- softmax / CE

def test_softmax_rows_sum_to_one():
    p = softmax(np.random.default_rng(5).normal(scale=30, size=(20, 4)))
    assert (p >= 0).all() and np.all(np.abs(p.sum(axis=1) - 1) < 1e-9)


def test_cross_entropy_examples():
    assert softmax_cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 2]).item() == pytest.approx(math.log(4), abs=1e-6)
    assert softmax_cross_entropy(Tensor([[1000.0, 0, 0, 0]]), [0]).item() == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        softmax_cross_entropy(Tensor(np.zeros((1, 4))), [4])


def test_cross_entropy_gradient_is_softmax_minus_onehot():
    g = np.random.default_rng(6)
    z = g.normal(size=(5, 4))
    y = np.array([0, 3, 1, 2, 2])
    logits = P(z)
    with Tape() as tape:
        loss = softmax_cross_entropy(logits, y)
    grad = backward(tape, loss, [logits])[logits]
    expected = (softmax(z) - np.eye(4)[y]) / len(y)
    assert np.allclose(grad, expected, atol=1e-15)
    h = 1e-5
    for idx in np.ndindex(z.shape):
        zp, zm = z.copy(), z.copy()
        zp[idx] += h
        zm[idx] -= h
        fd = (softmax_cross_entropy(Tensor(zp), y).item() - softmax_cross_entropy(Tensor(zm), y).item()) / (2 * h)
        assert abs(fd - grad[idx]) <= 1e-6 * max(abs(grad[idx]), 1e-3)


# ---------------------------------------------------------------- backward

def test_backward_sum_of_squares():
    x = P(np.random.default_rng(7).normal(size=(3, 2)))
    with Tape() as tape:
        loss = ops.sum(mul(x, x))
    assert np.array_equal(backward(tape, loss)[x], 2 * x.data)


def test_backward_unused_parameter_gets_zeros():
    x, unused = P([1.0, 2.0]), P([5.0, 6.0, 7.0])
    with Tape() as tape:
        loss = ops.sum(x)
    grads = backward(tape, loss, [x, unused])
    assert np.array_equal(grads[unused], np.zeros(3))


def test_backward_non_scalar_errors():
    x = P([1.0, 2.0])
    with Tape() as tape:
        y = mul(x, x)
    with pytest.raises(ValueError):
        backward(tape, y)


def test_backward_twice_identical():
    x, w = P(np.random.default_rng(8).normal(size=(2, 3))), P(np.random.default_rng(9).normal(size=(3, 2)))
    with Tape() as tape:
        loss = mean(relu(dense(x, w)))
    a, b = backward(tape, loss), backward(tape, loss)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_fanout_accumulates():
    x = P([3.0])
    with Tape() as tape:
        y = ops.add(mul(x, x), x)
        loss = ops.sum(y)
    assert backward(tape, loss)[x][0] == 7.0


def test_no_tape_means_no_recording():
    x = P([1.0])
    y = mul(x, x)
    assert not y.requires_grad


def test_non_finite_output_raises():
    with np.errstate(over="ignore"), pytest.raises(FloatingPointError):
        mul(Tensor([1e200]), Tensor([1e200]))


def test_tensors_are_read_only():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


# ---------------------------------------------------------------- finite-difference gradient checks

@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_ops(seed):
    for name, (f, arrays) in op_gradcheck_cases(seed).items():
        err = grad_check(f, arrays)
        assert err < 1e-4, f"{name}: relative error {err}"


# ---------------------------------------------------------------- RMSprop

def test_rmsprop_first_step():
    p = P([0.0])
    opt = RMSprop(lr=0.01, rho=0.9, eps=0.0)
    opt.step([p], {p: np.array([1.0])})
    assert opt.accumulator(p)[0] == pytest.approx(0.1)
    assert p.data[0] == pytest.approx(-0.01 * 3.16228, rel=1e-5)


def test_rmsprop_zero_gradient():
    p = P([1.0, 2.0])
    opt = RMSprop(lr=0.1)
    opt.step([p], {p: np.array([1.0, 1.0])})
    before, s = p.data.copy(), opt.accumulator(p).copy()
    opt.step([p], {p: np.zeros(2)})
    assert np.array_equal(p.data, before)
    assert np.allclose(opt.accumulator(p), 0.9 * s)


def test_rmsprop_constant_gradient_fixed_point():
    p = P([0.0])
    opt = RMSprop(lr=1e-3, eps=0.0)
    g = np.array([2.5])
    for _ in range(400):
        prev = p.data.copy()
        opt.step([p], {p: g})
    assert opt.accumulator(p)[0] == pytest.approx(6.25, rel=1e-12)
    assert abs(prev[0] - p.data[0]) == pytest.approx(1e-3, rel=1e-9)


def test_rmsprop_accumulator_nonnegative_and_functional_form():
    p = P(np.zeros(4))
    state = RMSprop(lr=0.01)
    g = np.random.default_rng(0)
    for _ in range(5):
        rmsprop_step([p], {p: g.normal(size=4)}, state)
    assert (state.accumulator(p) >= 0).all() and state.accumulator(p).any()


def test_rmsprop_lr_zero_leaves_params_bitwise():
    p = P(np.random.default_rng(0).normal(size=5))
    before = p.data.copy()
    RMSprop(lr=0.0).step([p], {p: np.ones(5)})
    assert np.array_equal(p.data, before)


def test_rmsprop_shape_mismatch():
    p = P([1.0, 2.0])
    with pytest.raises(ValueError):
        RMSprop().step([p], {p: np.ones(3)})


# ---------------------------------------------------------------- modules and checkpoints

class Tiny(Module):
    def __init__(self, seed=0):
        g = np.random.default_rng(seed)
        self.conv = Conv2d(1, 2, 3, 1, 1, g)
        self.bn = BatchNorm2d(2)
        self.fc = Dense(2, 3, g)


def test_he_init_scale():
    conv = Conv2d(16, 32, 3, 1, 1, np.random.default_rng(0))
    assert conv.weight.data.std() == pytest.approx(math.sqrt(2 / (16 * 9)), rel=0.05)


def test_checkpoint_roundtrip(tmp_path):
    m = Tiny(0)
    m.bn.stats.mean = np.array([0.5, -0.5])
    m.bn.stats.initialized = True
    path = tmp_path / "t.ckpt"
    checkpoint.save(path, m, {"kind": "tiny"})
    header, tensors = checkpoint.load(path)
    assert header["arch"] == {"kind": "tiny"}
    other = Tiny(1)
    checkpoint.restore(other, header, tensors)
    for (n1, a), (n2, b) in zip(m.named_parameters(), other.named_parameters()):
        assert n1 == n2 and np.array_equal(a.data, b.data)
    assert np.array_equal(other.bn.stats.mean, [0.5, -0.5]) and other.bn.stats.initialized


def test_checkpoint_layout(tmp_path):
    m = Tiny(0)
    path = tmp_path / "t.ckpt"
    checkpoint.save(path, m, {"kind": "tiny"})
    raw = path.read_bytes()
    n = int.from_bytes(raw[:8], "little")
    import json
    header = json.loads(raw[8:8 + n])
    names = [t["name"] for t in header["tensors"]]
    assert "conv.weight" in names
    blob = raw[8 + n:]
    assert len(blob) == 8 * sum(math.prod(t["shape"]) for t in header["tensors"])
