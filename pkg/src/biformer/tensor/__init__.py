"""Minimal dense tensor engine with a recording tape."""

from .core import (
    DEFAULT_DTYPE,
    IndexTensor,
    MacCounter,
    Node,
    Tape,
    Tensor,
    count_macs,
    current_tape,
    mac_scope,
    no_tape,
)
from .gradcheck import GradCheckReport, grad_check
from .ops import (
    add,
    concat_lastaxis,
    conv2d,
    depthwise_conv2d,
    gather_axis0,
    gelu,
    layer_norm,
    linear,
    matmul,
    mean_axis,
    mul,
    permute,
    reshape,
    scale,
    select0,
    softmax_lastaxis,
    stack,
    sub,
    sum_all,
    topk_indices,
    transpose_last,
)

__all__ = [
    "DEFAULT_DTYPE", "IndexTensor", "MacCounter", "Node", "Tape", "Tensor",
    "count_macs", "current_tape", "mac_scope", "no_tape",
    "GradCheckReport", "grad_check",
    "add", "concat_lastaxis", "conv2d", "depthwise_conv2d", "gather_axis0", "gelu",
    "layer_norm", "linear", "matmul", "mean_axis", "mul", "permute", "reshape",
    "scale", "select0", "softmax_lastaxis", "stack", "sub", "sum_all", "topk_indices",
    "transpose_last",
]
