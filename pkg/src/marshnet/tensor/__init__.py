"""Dense tensors, reverse-mode autodiff, layers and RMSprop."""
from .core import Tape, Tensor, backward
from .module import BatchNorm2d, Conv2d, Dense, Module
from .ops import (
    RunningStats,
    add,
    batchnorm,
    conv2d,
    dense,
    dropout,
    flatten,
    global_avg_pool,
    maxpool2x2,
    mean,
    mse,
    mul,
    relu,
    reshape,
    softmax,
    softmax_cross_entropy,
    upsample_nearest2x,
)
from .optim import RMSprop, rmsprop_step

__all__ = [
    "BatchNorm2d", "Conv2d", "Dense", "Module", "RMSprop", "RunningStats", "Tape", "Tensor",
    "add", "backward", "batchnorm", "conv2d", "dense", "dropout", "flatten", "global_avg_pool",
    "maxpool2x2", "mean", "mse", "mul", "relu", "reshape", "rmsprop_step", "softmax",
    "softmax_cross_entropy", "upsample_nearest2x",
]
