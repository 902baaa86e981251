"""Minimal dense-tensor engine with reverse-mode differentiation."""

from .checkpoint import CheckpointError, load_blocks, load_checkpoint, save_blocks, save_checkpoint
from .layers import MLP, BatchNorm, Dense, Dropout, Linear, Module, batch_norm, dropout
from .optim import Adam, AdamState, adam_step
from .tensor import (
    Tape,
    Tensor,
    add,
    apply,
    as_tensor,
    backward,
    concat,
    cross,
    div,
    einsum,
    gather,
    getitem,
    grad_enabled,
    leaky_relu,
    linear,
    matmul,
    max_pool,
    mean,
    mul,
    no_grad,
    normalize,
    record_kinks,
    relu,
    reshape,
    softmax_cross_entropy,
    sqrt,
    sub,
    sumsq,
    swapaxes,
    tsum,
)

__all__ = [
    "Adam", "AdamState", "BatchNorm", "CheckpointError", "Dense", "Dropout", "Linear", "MLP",
    "Module", "Tape", "Tensor", "adam_step", "add", "apply", "as_tensor", "backward", "batch_norm",
    "concat", "cross", "div", "dropout", "einsum", "gather", "getitem", "grad_enabled",
    "leaky_relu", "linear", "load_blocks", "load_checkpoint", "matmul", "max_pool", "mean",
    "mul", "no_grad", "normalize", "record_kinks", "relu", "reshape", "save_blocks", "save_checkpoint",
    "softmax_cross_entropy", "sqrt", "sub", "sumsq", "swapaxes", "tsum",
]
