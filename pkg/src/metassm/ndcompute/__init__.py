"""Minimal dense-tensor substrate with reverse-mode differentiation."""
from .gaussian import VARIANCE_FLOOR, GaussianDiag, gaussian_kl, gaussian_logpdf, reparam_sample
from .recurrent import GRUParams, gru_cell, gru_sequence
from .tensor import (
    Tape,
    Tensor,
    active_tape,
    add,
    apply_op,
    as_tensor,
    backward,
    broadcast_to,
    concat,
    default_dtype,
    div,
    exp,
    getitem,
    log,
    logsumexp,
    matmul,
    mean,
    mean_over_axis,
    mul,
    neg,
    pointwise,
    relu,
    reshape,
    set_default_dtype,
    sigmoid,
    softplus,
    sqrt,
    square,
    stack,
    sub,
    sum_,
    tanh,
    transpose,
)

__all__ = [name for name in dir() if not name.startswith("_")]
