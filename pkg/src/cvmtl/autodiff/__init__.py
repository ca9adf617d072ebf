"""Minimal deterministic tensor engine with reverse-mode differentiation."""

from .functional import (
    bilinear_sample,
    conv2d,
    conv_transpose2d,
    layer_normalize,
    log_softmax,
    silu_gate,
    softmax,
)
from .serialize import load_params, save_params
from .tensor import (
    Tape,
    Tensor,
    absolute,
    as_tensor,
    backward,
    concat,
    exp,
    log,
    matmul,
    no_grad,
    pad,
    power,
    reshape,
    sigmoid,
    silu,
    softplus,
    sqrt,
    stack,
    take,
    tmean,
    transpose,
    tsum,
)

__all__ = [
    "Tape",
    "Tensor",
    "absolute",
    "as_tensor",
    "backward",
    "bilinear_sample",
    "concat",
    "conv2d",
    "conv_transpose2d",
    "exp",
    "layer_normalize",
    "load_params",
    "log",
    "log_softmax",
    "matmul",
    "no_grad",
    "pad",
    "power",
    "reshape",
    "save_params",
    "sigmoid",
    "silu",
    "silu_gate",
    "softmax",
    "softplus",
    "sqrt",
    "stack",
    "take",
    "tmean",
    "transpose",
    "tsum",
]
