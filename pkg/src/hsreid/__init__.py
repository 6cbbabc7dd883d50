"""Head-shoulder adaptive re-identification toolkit."""

__version__ = "0.1.0"

from .tensor import Tensor, ShapeError, concat, matmul, conv2d, affine_sample

__all__ = ["Tensor", "ShapeError", "concat", "matmul", "conv2d", "affine_sample", "__version__"]
