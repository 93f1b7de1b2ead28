"""Minimal deterministic reverse-mode autodiff engine (float64, numpy)."""

from .conv import conv1d, conv2d, conv_transpose1d, glu
from .core import (
    ContractError,
    DiffArray,
    Tape,
    absolute,
    add,
    as_diff,
    backward,
    concat,
    current_tape,
    frame,
    getitem,
    leaky_relu,
    log,
    matmul,
    mul,
    no_grad,
    pad_last,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    sigmoid,
    sqrt,
    square,
    sub,
    transpose,
)
from .gradcheck import check_gradients, check_parameter_gradients

__all__ = [
    "ContractError",
    "DiffArray",
    "Tape",
    "absolute",
    "add",
    "as_diff",
    "backward",
    "check_gradients",
    "check_parameter_gradients",
    "concat",
    "conv1d",
    "conv2d",
    "conv_transpose1d",
    "current_tape",
    "frame",
    "getitem",
    "glu",
    "leaky_relu",
    "log",
    "matmul",
    "mul",
    "no_grad",
    "pad_last",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "sigmoid",
    "sqrt",
    "square",
    "sub",
    "transpose",
]
