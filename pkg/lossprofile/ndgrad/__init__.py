"""最小限の逆伝播付き密配列エンジン。"""
from .tensor import Tensor, parameter, constant
from .ops import (
    BatchNormState,
    batchnorm2d,
    conv2d,
    dropout,
    flatten,
    leaky_relu,
    linear,
    log_softmax,
    mse_loss,
    reshape,
    select,
    sigmoid,
    softmax,
    upsample_nearest,
    weighted_bce,
    weighted_sum,
)
from .optim import AdamState, adam_step
from .params import NetworkParams, glorot_kernel, glorot_matrix

__all__ = [
    "Tensor",
    "parameter",
    "constant",
    "BatchNormState",
    "batchnorm2d",
    "conv2d",
    "dropout",
    "flatten",
    "leaky_relu",
    "linear",
    "log_softmax",
    "mse_loss",
    "reshape",
    "select",
    "sigmoid",
    "softmax",
    "upsample_nearest",
    "weighted_bce",
    "weighted_sum",
    "AdamState",
    "adam_step",
    "NetworkParams",
    "glorot_kernel",
    "glorot_matrix",
]
