"""Dense float64 tensors with reverse-mode automatic differentiation."""

from . import ops
from .core import Tensor, as_tensor, backward, detect_anomaly, no_grad
from .ops import (
    broadcast_shape,
    concat,
    conv2d,
    conv2d_adjoint,
    conv_transpose2d,
    elementwise,
    matmul,
    pad2d,
    softmax,
)

__all__ = [
    "Tensor", "as_tensor", "backward", "detect_anomaly", "no_grad", "ops",
    "broadcast_shape", "concat", "conv2d", "conv2d_adjoint", "conv_transpose2d",
    "elementwise", "matmul", "pad2d", "softmax",
]
