"""Dual-branch gated attention propagation for multi-object video segmentation."""

__version__ = "0.1.0"

from .tensor import Tensor, no_grad

__all__ = ["Tensor", "no_grad", "__version__"]
