"""Minimal dense-tensor runtime: autodiff tape, Adam, cosine schedule, checkpoints."""

from .autodiff import (
    DTYPE, RowGather, ShapeError, SparseOperator, Tape, TapeError, Tensor, add, backward, concat,
    gather_rows, l1_loss, leaky_relu, matmul, mul, no_grad, numerical_grad, reduce_mean,
    reduce_sum, reshape, slice_, sparse_matmul, sub,
)
from .checkpoint import CheckpointError, config_hash, load_checkpoint, save_checkpoint
from .optim import NonFiniteGradient, OptimizerState, adam_step, cosine_lr

__all__ = [
    "DTYPE", "RowGather", "ShapeError", "SparseOperator", "Tape", "TapeError", "Tensor", "add",
    "backward", "concat", "gather_rows", "l1_loss", "leaky_relu", "matmul", "mul", "no_grad",
    "numerical_grad", "reduce_mean", "reduce_sum", "reshape", "slice_", "sparse_matmul", "sub",
    "CheckpointError", "config_hash", "load_checkpoint", "save_checkpoint",
    "NonFiniteGradient", "OptimizerState", "adam_step", "cosine_lr",
]
