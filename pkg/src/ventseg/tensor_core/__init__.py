"""Minimal differentiable numeric core: 3D convs, pooling, normalization,
activations, dropout, linear maps, and a finite-difference gradient checker.
"""

from .conv import (
    conv_output_dim,
    conv3d,
    conv3d_forward,
    conv3d_backward,
    cross_conv3d_forward,
    cross_conv3d_backward,
    materialize_cross_kernel,
    transpose_conv3d,
    transpose_conv3d_forward,
    transpose_conv3d_backward,
    maxpool3d_forward,
    maxpool3d_backward,
)
from .gradcheck import GradCheckReport, grad_check
from .layers import (
    BatchNorm,
    Conv3d,
    CrossConv3d,
    Dropout,
    Flatten,
    Layer,
    Linear,
    MaxPool3d,
    Param,
    ReLU,
    Sequential,
    Sigmoid,
    TransposeConv3d,
)
from .runtime import fft_workers, set_num_threads

__all__ = [
    "conv_output_dim",
    "conv3d",
    "conv3d_forward",
    "conv3d_backward",
    "cross_conv3d_forward",
    "cross_conv3d_backward",
    "materialize_cross_kernel",
    "transpose_conv3d",
    "transpose_conv3d_forward",
    "transpose_conv3d_backward",
    "maxpool3d_forward",
    "maxpool3d_backward",
    "GradCheckReport",
    "grad_check",
    "BatchNorm",
    "Conv3d",
    "CrossConv3d",
    "Dropout",
    "Flatten",
    "Layer",
    "Linear",
    "MaxPool3d",
    "Param",
    "ReLU",
    "Sequential",
    "Sigmoid",
    "TransposeConv3d",
    "fft_workers",
    "set_num_threads",
]
