"""Guided-upsampling monocular depth estimation at desk scale."""

from guidedepth.tensor import Tensor, backward, no_grad

__all__ = ["Tensor", "backward", "no_grad"]
__version__ = "0.1.0"
