"""Neural-network building blocks: conv/dense layers, pooling, sampling.

Layers are small parameter holders; all math goes through the tensor
ops so gradients come for free.  Feature maps are batched [N, C, H, W].
"""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, affine_sample, conv2d, matmul

GEM_EPS = 1e-6
GEM_P_INIT = 3.0
GEM_P_MIN = 1.0


def kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    """Uniform init with bound sqrt(6 / fan_in)."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class ConvBlock:
    """3x3-style convolution with bias and optional relu."""

    def __init__(self, in_ch, out_ch, ksize=3, stride=1, padding=1, relu=True,
                 rng=None, dtype=np.float32):
        if rng is None:
            rng = np.random.default_rng(0)
        fan_in = in_ch * ksize * ksize
        self.weight = Tensor(kaiming_uniform(rng, (out_ch, in_ch, ksize, ksize), fan_in, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.relu = relu

    @classmethod
    def from_params(cls, weight, bias, stride=1, padding=1, relu=True):
        block = cls.__new__(cls)
        block.weight = weight if isinstance(weight, Tensor) else Tensor(weight)
        block.bias = bias if isinstance(bias, Tensor) else Tensor(bias)
        block.stride = stride
        block.padding = padding
        block.relu = relu
        return block

    def __call__(self, x):
        y = conv2d(x, self.weight, stride=self.stride, padding=self.padding)
        y = y + self.bias.reshape((1, -1, 1, 1))
        return y.relu() if self.relu else y

    def params(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


class Dense:
    """Fully connected layer [N, in] -> [N, out] with a fixed activation."""

    ACTIVATIONS = ("none", "relu", "sigmoid", "softmax")

    def __init__(self, in_dim, out_dim, activation="none", rng=None, dtype=np.float32):
        if activation not in self.ACTIVATIONS:
            raise ValueError(f"dense: unknown activation {activation!r}")
        if rng is None:
            rng = np.random.default_rng(0)
        self.weight = Tensor(kaiming_uniform(rng, (out_dim, in_dim), in_dim, dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)
        self.activation = activation

    @classmethod
    def from_params(cls, weight, bias, activation="none"):
        layer = cls.__new__(cls)
        layer.weight = weight if isinstance(weight, Tensor) else Tensor(weight)
        layer.bias = bias if isinstance(bias, Tensor) else Tensor(bias)
        layer.activation = activation
        return layer

    def __call__(self, x):
        y = matmul(x, self.weight, tb=True) + self.bias
        if self.activation == "relu":
            return y.relu()
        if self.activation == "sigmoid":
            return y.sigmoid()
        if self.activation == "softmax":
            return y.softmax(axis=1)
        return y

    def params(self, prefix):
        return {f"{prefix}.weight": self.weight, f"{prefix}.bias": self.bias}


def _as_4d(x):
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim == 3:
        return x.reshape((1,) + x.shape), True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"pooling: expected a [C, H, W] or [N, C, H, W] map, got shape {x.shape}")


def gap(x):
    """Global average pooling over the spatial axes."""
    x, squeeze = _as_4d(x)
    out = x.mean(axes=(2, 3))
    return out.reshape((-1,)) if squeeze else out


def gmp(x):
    """Global max pooling over the spatial axes."""
    x, squeeze = _as_4d(x)
    out = x.max(axes=(2, 3))
    return out.reshape((-1,)) if squeeze else out


def gem_pool(x, p, eps=GEM_EPS):
    """Generalized-mean pooling: (mean clamp(x, eps)^p)^(1/p).

    ``p`` is a scalar tensor; the clamp keeps the power well defined on
    non-positive activations.  p = 1 reduces to average pooling and
    large p approaches max pooling.
    """
    if not isinstance(p, Tensor):
        p = Tensor(np.asarray(p, dtype=x.dtype if isinstance(x, Tensor) else None))
    x, squeeze = _as_4d(x)
    powered = x.clip(lo=eps) ** p.reshape((1, 1))
    pooled = powered.mean(axes=(2, 3))
    out = pooled ** (1.0 / p).reshape((1, 1))
    return out.reshape((-1,)) if squeeze else out


class GeM:
    """Generalized-mean pooling with a learnable exponent (init 3.0)."""

    def __init__(self, p_init=GEM_P_INIT, eps=GEM_EPS, dtype=np.float32):
        self.p = Tensor(np.full(1, p_init, dtype=dtype), requires_grad=True)
        self.eps = eps

    @classmethod
    def from_p(cls, p, eps=GEM_EPS):
        pool = cls.__new__(cls)
        pool.p = p if isinstance(p, Tensor) else Tensor(np.asarray(p))
        pool.eps = eps
        return pool

    def __call__(self, x):
        return gem_pool(x, self.p, eps=self.eps)

    def params(self, prefix):
        return {f"{prefix}.p": self.p}


def affine_grid_sample(image, params, out_h, out_w):
    """Bilinear resampling under a scale-and-translate transform.

    Accepts [C, H, W] with params [4], or [N, C, H, W] with [N, 4].
    """
    single = False
    if not isinstance(image, Tensor):
        image = Tensor(image)
    if not isinstance(params, Tensor):
        params = Tensor(params)
    if image.ndim == 3:
        image = image.reshape((1,) + image.shape)
        single = True
    if params.ndim == 1:
        params = params.reshape((1, -1))
    out = affine_sample(image, params, out_h, out_w)
    return out.reshape(out.shape[1:]) if single else out
