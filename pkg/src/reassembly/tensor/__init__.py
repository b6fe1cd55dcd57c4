"""Minimal dense-array engine with reverse-mode autodiff, optimizer, checkpoints."""

from .array import (
    Array,
    add,
    atan2,
    backward,
    clamp,
    concat,
    constant,
    cos,
    detach,
    div,
    exp,
    layer_norm,
    log,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    neg,
    parameter,
    relu,
    reshape,
    sigmoid,
    sin,
    slice_axis,
    softmax,
    sqrt,
    square,
    sub,
    sum_,
    tanh,
    transpose,
    zero_grads,
)
from .checkpoint import load_checkpoint, save_checkpoint
from .optim import Adam

__all__ = [
    "Array",
    "Adam",
    "add",
    "atan2",
    "backward",
    "clamp",
    "concat",
    "constant",
    "cos",
    "detach",
    "div",
    "exp",
    "layer_norm",
    "load_checkpoint",
    "log",
    "matmul",
    "maximum",
    "mean",
    "minimum",
    "mul",
    "neg",
    "parameter",
    "relu",
    "reshape",
    "save_checkpoint",
    "sigmoid",
    "sin",
    "slice_axis",
    "softmax",
    "sqrt",
    "square",
    "sub",
    "sum_",
    "tanh",
    "transpose",
    "zero_grads",
]
