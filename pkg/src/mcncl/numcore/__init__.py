"""Dense float64 tensors with reverse-mode differentiation."""
from mcncl.numcore.gradcheck import GradCheckError, GradCheckReport, grad_check, grad_check_report
from mcncl.numcore.ops import (
    add,
    concat_cols,
    conv1d,
    conv1d_grouped,
    cross_entropy_logits,
    gather_rows,
    l2_normalize,
    layer_norm,
    linear,
    matmul,
    mean_all,
    mean_rows,
    mul,
    relu,
    reshape,
    scale,
    scatter_rows,
    segment_mean,
    sigmoid,
    slice_cols,
    softmax_lastdim,
    sub,
    sum_all,
    transpose,
)
from mcncl.numcore.tensor import ShapeError, Tape, TapeTensor, active_tape, apply_op, constant, parameter

__all__ = [
    "GradCheckError",
    "GradCheckReport",
    "ShapeError",
    "Tape",
    "TapeTensor",
    "active_tape",
    "add",
    "apply_op",
    "concat_cols",
    "constant",
    "conv1d",
    "conv1d_grouped",
    "cross_entropy_logits",
    "gather_rows",
    "grad_check",
    "grad_check_report",
    "l2_normalize",
    "layer_norm",
    "linear",
    "matmul",
    "mean_all",
    "mean_rows",
    "mul",
    "parameter",
    "relu",
    "reshape",
    "scale",
    "scatter_rows",
    "segment_mean",
    "sigmoid",
    "slice_cols",
    "softmax_lastdim",
    "sub",
    "sum_all",
    "transpose",
]
