"""Dense float64 tensors with reverse-mode differentiation, plus the
parameter store, optimizer step, learning-rate schedule and checkpoint I/O
that the model modules build on."""

from .tensor import (
    Tensor,
    tensor,
    add,
    backward,
    bce_with_logits,
    concat,
    cross_entropy,
    layer_norm,
    matmul,
    mean,
    mha_cross,
    mha_self,
    mse,
    narrow,
    reshape,
    scale,
    silu,
    softmax,
    square,
    take_rows,
    transpose,
    tsum,
)
from .store import CosineSchedule, ParamStore, sgd_step
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tensor",
    "tensor",
    "add",
    "backward",
    "bce_with_logits",
    "concat",
    "cross_entropy",
    "layer_norm",
    "matmul",
    "mean",
    "mha_cross",
    "mha_self",
    "mse",
    "narrow",
    "reshape",
    "scale",
    "silu",
    "softmax",
    "square",
    "take_rows",
    "transpose",
    "tsum",
    "CosineSchedule",
    "ParamStore",
    "sgd_step",
    "load_checkpoint",
    "save_checkpoint",
]
