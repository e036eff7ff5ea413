"""Reverse-mode automatic differentiation on a flat tape of ndarray ops."""

from .tape import (
    Tape,
    Tensor,
    backward,
    concatenate,
    constant,
    cumsum,
    gather_rows,
    matmul,
    softplus,
    stack,
    where,
)
from .params import ParamStore, load_checkpoint, save_checkpoint
from .optim import adam_step
from .checks import FiniteDiffReport, finite_diff_check

__all__ = [
    "Tape",
    "Tensor",
    "backward",
    "concatenate",
    "constant",
    "cumsum",
    "gather_rows",
    "matmul",
    "softplus",
    "stack",
    "where",
    "ParamStore",
    "save_checkpoint",
    "load_checkpoint",
    "adam_step",
    "FiniteDiffReport",
    "finite_diff_check",
]
