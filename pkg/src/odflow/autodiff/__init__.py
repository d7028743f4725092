"""Minimal dense autodiff engine, layers and optimizer."""

from .gradcheck import grad_check
from .optim import Adam, AdamState, adam_step
from .tensor import (
    NonFiniteDetected,
    NonScalarLoss,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    matmul,
    mean,
    mse_loss,
    mul,
    no_grad,
    parameter,
    relu,
    reshape,
    row_normalize,
    row_softmax,
    sigmoid,
    slice_,
    sum_,
    take,
    tanh,
    transpose,
)

__all__ = [
    "Adam",
    "AdamState",
    "NonFiniteDetected",
    "NonScalarLoss",
    "Tensor",
    "adam_step",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "grad_check",
    "matmul",
    "mean",
    "mse_loss",
    "mul",
    "no_grad",
    "parameter",
    "relu",
    "reshape",
    "row_normalize",
    "row_softmax",
    "sigmoid",
    "slice_",
    "sum_",
    "take",
    "tanh",
    "transpose",
]
