"""Two-stream re-identification model with a localized head-shoulder branch.

The global stream embeds the whole image.  The head-shoulder stream
crops a learned region with a constrained affine sampler, splits the
resulting feature map into horizontal stripes, and applies channel and
spatial attention per stripe.  An adaptive fusion head weights the two
embeddings per input before concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import ConvBlock, Dense, GeM, affine_grid_sample, gap, gmp
from .tensor import Tensor, concat

VARIANTS = ("haa", "concat", "global-only", "hsa-only")
SPATIAL_STD_EPS = 1e-6


@dataclass
class ModelConfig:
    input_hw: tuple = (96, 32)
    backbone_channels: tuple = (16, 32, 64, 128)
    backbone_strides: tuple = (2, 2, 2, 1)
    hll_channels: tuple = (8, 16, 32)
    embed_dim: int = 120
    reduction: int = 4
    stripes: int = 3
    share_backbone: bool = False
    pooling: str = "gem"
    variant: str = "haa"
    dtype: str = "float32"

    def __post_init__(self):
        self.input_hw = tuple(int(v) for v in self.input_hw)
        self.backbone_channels = tuple(int(v) for v in self.backbone_channels)
        self.backbone_strides = tuple(int(v) for v in self.backbone_strides)
        self.hll_channels = tuple(int(v) for v in self.hll_channels)
        if self.variant not in VARIANTS:
            raise ValueError(f"config: unknown variant {self.variant!r}")
        if self.pooling not in ("gap", "gmp", "gem"):
            raise ValueError(f"config: unknown pooling {self.pooling!r}")
        if len(self.backbone_channels) != len(self.backbone_strides):
            raise ValueError("config: backbone channels and strides must have equal length")
        if self.embed_dim % 2 != 0 or self.embed_dim % (2 * self.stripes) != 0:
            raise ValueError(
                f"config: embed_dim {self.embed_dim} must be divisible by 2 and by 2*stripes "
                f"({2 * self.stripes})"
            )
        if self.backbone_channels[-1] % self.reduction != 0:
            raise ValueError("config: last backbone width must be divisible by the reduction ratio")
        fh, fw = self.feature_hw()
        if fh < self.stripes:
            raise ValueError(
                f"config: feature map height {fh} is smaller than the stripe count {self.stripes}"
            )
        if fw < 1:
            raise ValueError("config: input too small for the backbone strides")

    def feature_hw(self):
        h, w = self.input_hw
        for s in self.backbone_strides:
            h = (h + 2 - 3) // s + 1
            w = (w + 2 - 3) // s + 1
        return h, w

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "float32" else np.float64

    def descriptor_dim(self):
        if self.variant in ("haa", "concat"):
            return self.embed_dim
        return self.embed_dim // 2


@dataclass
class Descriptor:
    """Per-input embeddings: fused f plus the parts that built it."""

    f: Tensor
    f_g: Tensor = None
    f_h: Tensor = None
    f_b: Tensor = None
    f_w: Tensor = None


def squash_params(raw):
    """Map raw localization outputs to (s_x, s_y, t_x, t_y).

    Scales go through a sigmoid (crops never flip or grow past the
    frame), translations through tanh.
    """
    scales = raw.narrow(1, 0, 2).sigmoid()
    shifts = raw.narrow(1, 2, 2).tanh()
    return concat([scales, shifts], axis=1)


def params_to_box(params):
    """Transform parameters -> normalized (left, top, right, bottom).

    The sampled window spans t - s .. t + s in [-1, 1] coordinates on
    each axis; mapping to [0, 1] gives the box edges, clamped to the
    frame.
    """
    if not isinstance(params, Tensor):
        params = Tensor(params)
    sx = params.narrow(1, 0, 1)
    sy = params.narrow(1, 1, 1)
    tx = params.narrow(1, 2, 1)
    ty = params.narrow(1, 3, 1)
    left = (tx - sx + 1.0) * 0.5
    right = (tx + sx + 1.0) * 0.5
    top = (ty - sy + 1.0) * 0.5
    bottom = (ty + sy + 1.0) * 0.5
    return concat([left, top, right, bottom], axis=1).clip(0.0, 1.0)


def channel_attention(x, reduce_fc, expand_fc, gate_pool):
    """Squeeze-excitation gate with a shortcut: x + x * d.

    d = sigmoid(U relu(W pool(x))) comes from the two dense layers; the
    shortcut keeps every channel's sign pattern intact.
    """
    d = expand_fc(reduce_fc(gate_pool(x)))
    n, c = d.shape
    return x + x * d.reshape((n, c, 1, 1))


def spatial_attention(a):
    """Standardized channel-sum gate.

    The per-location channel sum is standardized over the map and
    squashed with a sigmoid; a uniform map gates everywhere at 0.5.
    """
    s = a.sum(axes=1, keepdims=True)
    m = s.mean(axes=(2, 3), keepdims=True)
    centered = s - m
    var = (centered * centered).mean(axes=(2, 3), keepdims=True)
    std = (var + 1e-12).sqrt()
    gate = (centered / (std + SPATIAL_STD_EPS)).sigmoid()
    return a * gate


def adaptive_fuse(f_g, f_h, black_fc, weight_fc):
    """Weight the two streams per input and concatenate.

    f_b are black-appearance logits read from the global embedding;
    f_w = sigmoid of a linear map of f_b gives the stream weights
    (w1 for the global stream, w2 for the head-shoulder stream).
    """
    f_b = black_fc(f_g)
    f_w = weight_fc(f_b).sigmoid()
    w1 = f_w.narrow(1, 0, 1)
    w2 = f_w.narrow(1, 1, 1)
    f = concat([f_g * w1, f_h * w2], axis=1)
    return Descriptor(f=f, f_g=f_g, f_h=f_h, f_b=f_b, f_w=f_w)


class Backbone:
    """Stack of 3x3 conv blocks; strides set the downsampling."""

    def __init__(self, in_ch, channels, strides, rng, dtype):
        self.blocks = []
        c = in_ch
        for out_ch, stride in zip(channels, strides):
            self.blocks.append(ConvBlock(c, out_ch, stride=stride, rng=rng, dtype=dtype))
            c = out_ch

    def __call__(self, x):
        for block in self.blocks:
            x = block(x)
        return x

    def params(self, prefix):
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(block.params(f"{prefix}.{i}"))
        return out


class HeadLocalizer:
    """Small conv tower regressing the head-shoulder crop transform.

    The final dense layer starts at zero weight with a bias chosen so
    the initial crop is the upper 45% of the frame at 80% width.
    """

    INIT_BOX = (0.1, 0.0, 0.9, 0.45)

    def __init__(self, channels, rng, dtype):
        self.tower = Backbone(3, channels, (2,) * len(channels), rng, dtype)
        self.fc = Dense(channels[-1], 4, rng=rng, dtype=dtype)
        self.fc.weight.data[...] = 0.0
        self.fc.bias.data[...] = np.array(
            [np.log(4.0), np.log(0.45 / 0.55), 0.0, np.arctanh(-0.55)], dtype=dtype
        )

    def predict(self, x):
        feat = gap(self.tower(x))
        return squash_params(self.fc(feat))

    def params(self, prefix):
        out = self.tower.params(f"{prefix}.tower")
        out.update(self.fc.params(f"{prefix}.fc"))
        return out


class StripeAttention:
    """Per-stripe attention: channel gate, spatial gate, pool, reduce."""

    def __init__(self, channels, reduction, out_dim, pooling, rng, dtype):
        hidden = channels // reduction
        self.reduce_fc = Dense(channels, hidden, activation="relu", rng=rng, dtype=dtype)
        self.expand_fc = Dense(hidden, channels, activation="sigmoid", rng=rng, dtype=dtype)
        self.gate_pool = GeM(dtype=dtype)
        self.pooling = pooling
        self.pool = GeM(dtype=dtype) if pooling == "gem" else None
        self.out_fc = Dense(channels, out_dim, rng=rng, dtype=dtype)

    def __call__(self, stripe):
        a = channel_attention(stripe, self.reduce_fc, self.expand_fc, self.gate_pool)
        a = spatial_attention(a)
        if self.pooling == "gap":
            pooled = gap(a)
        elif self.pooling == "gmp":
            pooled = gmp(a)
        else:
            pooled = self.pool(a)
        return self.out_fc(pooled)

    def params(self, prefix):
        out = {}
        out.update(self.gate_pool.params(f"{prefix}.gate_pool"))
        out.update(self.reduce_fc.params(f"{prefix}.reduce_fc"))
        out.update(self.expand_fc.params(f"{prefix}.expand_fc"))
        if self.pool is not None:
            out.update(self.pool.params(f"{prefix}.pool"))
        out.update(self.out_fc.params(f"{prefix}.out_fc"))
        return out


class HaaModel:
    """Variant-aware two-stream model.

    Variants: "haa" (both streams, adaptive fusion), "concat" (both
    streams, plain concatenation), "global-only", "hsa-only".
    """

    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        dtype = cfg.np_dtype
        ss = np.random.SeedSequence([91, seed])
        keys = ("global", "hll", "hsa", "stripes", "fuse")
        rngs = dict(zip(keys, (np.random.default_rng(c) for c in ss.spawn(len(keys)))))

        c_out = cfg.backbone_channels[-1]
        half = cfg.embed_dim // 2
        self.global_backbone = None
        self.global_reduce = None
        self.hll = None
        self.hsa_backbone = None
        self.stripes = None
        self.black_fc = None
        self.weight_fc = None

        if self.has_global:
            self.global_backbone = Backbone(3, cfg.backbone_channels, cfg.backbone_strides,
                                            rngs["global"], dtype)
            self.global_reduce = Dense(c_out, half, rng=rngs["global"], dtype=dtype)
        if self.has_hsa:
            self.hll = HeadLocalizer(cfg.hll_channels, rngs["hll"], dtype)
            if cfg.share_backbone and self.has_global:
                self.hsa_backbone = self.global_backbone
            else:
                self.hsa_backbone = Backbone(3, cfg.backbone_channels, cfg.backbone_strides,
                                             rngs["hsa"], dtype)
            stripe_dim = half // cfg.stripes
            self.stripes = [
                StripeAttention(c_out, cfg.reduction, stripe_dim, cfg.pooling, rngs["stripes"], dtype)
                for _ in range(cfg.stripes)
            ]
        if self.has_fusion:
            self.black_fc = Dense(half, 2, rng=rngs["fuse"], dtype=dtype)
            self.weight_fc = Dense(2, 2, rng=rngs["fuse"], dtype=dtype)

    # -- structure ----------------------------------------------------------

    @property
    def has_global(self):
        return self.cfg.variant in ("haa", "concat", "global-only")

    @property
    def has_hsa(self):
        return self.cfg.variant in ("haa", "concat", "hsa-only")

    @property
    def has_fusion(self):
        return self.cfg.variant == "haa"

    def named_parameters(self):
        out = {}
        if self.global_backbone is not None:
            out.update(self.global_backbone.params("global.backbone"))
            out.update(self.global_reduce.params("global.reduce"))
        if self.hll is not None:
            out.update(self.hll.params("hll"))
        if self.has_hsa:
            if self.hsa_backbone is not self.global_backbone:
                out.update(self.hsa_backbone.params("hsa.backbone"))
            for i, stripe in enumerate(self.stripes):
                out.update(stripe.params(f"hsa.stripe{i}"))
        if self.black_fc is not None:
            out.update(self.black_fc.params("fuse.black"))
            out.update(self.weight_fc.params("fuse.weights"))
        return out

    def state_arrays(self):
        return {name: t.data.copy() for name, t in self.named_parameters().items()}

    def load_state(self, arrays):
        params = self.named_parameters()
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        if missing or extra:
            raise ValueError(f"load_state: parameter name mismatch (missing {missing}, extra {extra})")
        for name, t in params.items():
            arr = np.asarray(arrays[name])
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"load_state: shape mismatch for {name}: checkpoint {arr.shape}, model {t.data.shape}"
                )
            t.data[...] = arr.astype(t.data.dtype)

    def freeze_hll(self):
        if self.hll is not None:
            for t in self.hll.params("hll").values():
                t.requires_grad = False

    def gem_param_names(self):
        return tuple(n for n in self.named_parameters() if n.endswith(".p"))

    # -- forward paths ------------------------------------------------------

    def global_forward(self, x):
        fmap = self.global_backbone(x)
        return self.global_reduce(gap(fmap))

    def hll_predict(self, x):
        return self.hll.predict(x)

    def hsa_forward(self, x, params=None):
        if params is None:
            params = self.hll_predict(x)
        h, w = self.cfg.input_hw
        crop = affine_grid_sample(x, params, h, w)
        fmap = self.hsa_backbone(crop)
        fh = fmap.shape[2]
        base = fh // self.cfg.stripes
        parts = []
        for i, stripe in enumerate(self.stripes):
            start = i * base
            length = base if i < self.cfg.stripes - 1 else fh - start
            parts.append(stripe(fmap.narrow(2, start, length)))
        return concat(parts, axis=1)

    def forward(self, x):
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.cfg.np_dtype))
        variant = self.cfg.variant
        if variant == "global-only":
            f_g = self.global_forward(x)
            return Descriptor(f=f_g, f_g=f_g)
        if variant == "hsa-only":
            f_h = self.hsa_forward(x)
            return Descriptor(f=f_h, f_h=f_h)
        f_g = self.global_forward(x)
        f_h = self.hsa_forward(x)
        if variant == "concat":
            return Descriptor(f=concat([f_g, f_h], axis=1), f_g=f_g, f_h=f_h)
        return adaptive_fuse(f_g, f_h, self.black_fc, self.weight_fc)

    __call__ = forward
