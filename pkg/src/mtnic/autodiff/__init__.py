"""Minimal reverse-mode automatic differentiation over float64 arrays."""

from .gradcheck import GradCheckReport, finite_difference_check
from .ops import (
    batch_norm,
    conv2d,
    conv_output_size,
    cross_entropy,
    dense,
    depthwise_conv2d,
    depthwise_separable_conv2d,
    dropout,
    leaky_relu,
    mse,
    pointwise_conv2d,
    softmax,
    spatial_mean,
    sum_of_squares,
)
from .tensor import NumericError, Tensor, as_tensor, concat, grad_enabled, no_grad

__all__ = [
    "GradCheckReport",
    "NumericError",
    "Tensor",
    "as_tensor",
    "batch_norm",
    "concat",
    "conv2d",
    "conv_output_size",
    "cross_entropy",
    "dense",
    "depthwise_conv2d",
    "depthwise_separable_conv2d",
    "dropout",
    "finite_difference_check",
    "grad_enabled",
    "leaky_relu",
    "mse",
    "no_grad",
    "pointwise_conv2d",
    "softmax",
    "spatial_mean",
    "sum_of_squares",
]
