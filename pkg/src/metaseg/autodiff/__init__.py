"""Minimal dense-tensor autodiff: exactly the ops the pipeline needs."""

from .gradcheck import GradCheckResult, grad_check
from .optim import AdamState, adam_step
from .ops import (
    BatchNormState,
    absolute,
    add,
    batchnorm2d,
    concat,
    constant,
    conv2d,
    div,
    exp,
    gather_rows,
    global_avg_pool,
    l2_normalize_channels,
    leaky_relu,
    log,
    matmul,
    max_pool2x2,
    mean,
    mul,
    neg,
    pool2d,
    replicate_upsample,
    reshape,
    softmax_cross_entropy,
    softmax_probs,
    spd_solve,
    sqrt,
    sub,
    sum_,
    transpose,
    upsample_bilinear,
)
from .tensor import (
    Gradients,
    Tape,
    Tensor,
    backward,
    default_dtype,
    default_dtype_name,
    set_debug,
    set_default_dtype,
    using_dtype,
)

__all__ = [
    "AdamState",
    "BatchNormState",
    "GradCheckResult",
    "Gradients",
    "Tape",
    "Tensor",
    "absolute",
    "adam_step",
    "add",
    "backward",
    "batchnorm2d",
    "concat",
    "constant",
    "conv2d",
    "default_dtype",
    "default_dtype_name",
    "div",
    "exp",
    "gather_rows",
    "global_avg_pool",
    "grad_check",
    "l2_normalize_channels",
    "leaky_relu",
    "log",
    "matmul",
    "max_pool2x2",
    "mean",
    "mul",
    "neg",
    "pool2d",
    "replicate_upsample",
    "reshape",
    "set_debug",
    "set_default_dtype",
    "softmax_cross_entropy",
    "softmax_probs",
    "spd_solve",
    "sqrt",
    "sub",
    "sum_",
    "transpose",
    "upsample_bilinear",
    "using_dtype",
]
