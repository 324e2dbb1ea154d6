from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import GradCheckResult, check_gradients, relative_error
from .optim import OptimState, adamw_step, cosine_lr
from .tensor import (
    NonFiniteError,
    Tape,
    Tensor,
    active_tape,
    add,
    as_tensor,
    batch_norm,
    broadcast_to,
    concat,
    cross_entropy,
    gelu,
    getitem,
    l2_normalize,
    layer_norm,
    matmul,
    mean,
    mul,
    reshape,
    scale,
    softmax_lastdim,
    sub,
    transpose,
)
from .tensor import sum as tsum

__all__ = [
    "CheckpointError",
    "GradCheckResult",
    "NonFiniteError",
    "OptimState",
    "Tape",
    "Tensor",
    "active_tape",
    "adamw_step",
    "add",
    "as_tensor",
    "batch_norm",
    "broadcast_to",
    "check_gradients",
    "concat",
    "cosine_lr",
    "cross_entropy",
    "gelu",
    "getitem",
    "l2_normalize",
    "layer_norm",
    "load_checkpoint",
    "matmul",
    "mean",
    "mul",
    "relative_error",
    "reshape",
    "save_checkpoint",
    "scale",
    "softmax_lastdim",
    "sub",
    "transpose",
    "tsum",
]
