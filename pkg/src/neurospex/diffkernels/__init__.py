"""Minimal reverse-mode differentiation core and the layers the model needs."""

from .gradcheck import FD_STEP, GradCheckReport, grad_check
from .nn import Module, constant, uniform_fan_in
from .ops import (
    LN_EPS,
    add,
    concat,
    conv1d,
    crop,
    depthwise_conv1d,
    div,
    frame_split,
    layer_norm,
    linear_interpolate_time,
    linear_map,
    log,
    log10,
    matmul,
    mean,
    mul,
    multi_head_attention,
    multiply,
    overlap_add,
    prelu,
    relu,
    reshape,
    softmax,
    sub,
    sum,
    swapaxes,
    transpose,
)
from .serialize import load_arrays, save_arrays
from .tensor import Parameter, Tensor, as_tensor, is_grad_enabled, no_grad


def pointwise_and_affine(kind: str, *inputs):
    """Dispatch for the elementwise/affine family by name."""
    table = {
        "relu": relu,
        "prelu": prelu,
        "add": add,
        "multiply": mul,
        "linear_map": linear_map,
    }
    if kind not in table:
        raise ValueError(f"unknown pointwise kind {kind!r}")
    return table[kind](*inputs)


__all__ = [
    "FD_STEP",
    "GradCheckReport",
    "LN_EPS",
    "Module",
    "Parameter",
    "Tensor",
    "add",
    "as_tensor",
    "concat",
    "constant",
    "conv1d",
    "crop",
    "depthwise_conv1d",
    "div",
    "frame_split",
    "grad_check",
    "is_grad_enabled",
    "layer_norm",
    "linear_interpolate_time",
    "linear_map",
    "load_arrays",
    "log",
    "log10",
    "matmul",
    "mean",
    "mul",
    "multi_head_attention",
    "multiply",
    "no_grad",
    "overlap_add",
    "pointwise_and_affine",
    "prelu",
    "relu",
    "reshape",
    "save_arrays",
    "softmax",
    "sub",
    "sum",
    "swapaxes",
    "transpose",
    "uniform_fan_in",
]
