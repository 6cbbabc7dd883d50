"""Dense tensors with reverse-mode automatic differentiation.

The graph is implicit: every tensor produced by an operation holds
references to its parent tensors plus a closure that routes the output
gradient back to them.  ``Tensor.backward`` topologically sorts the
subgraph reachable from the loss and runs the closures in reverse
order, visiting each node exactly once.

Only operations whose inputs require gradients record graph edges.
Everything else behaves like a plain numpy value, so frozen submodules
drop out of the backward pass entirely.

Tensors are treated as immutable after creation; the two sanctioned
mutations are gradient accumulation into ``.grad`` and in-place
parameter updates by an optimizer between graph constructions.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "concat",
    "matmul",
    "conv2d",
    "affine_sample",
    "graph_nodes",
]

_REL_TOL_KINDS = ("f",)


class ShapeError(ValueError):
    """Operand shapes incompatible with an operation's shape rule."""


def _unbroadcast(grad, shape):
    """Reduce ``grad`` back to ``shape`` by summing broadcast axes."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_kind", "_kink")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in _REL_TOL_KINDS:
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents = ()
        self._backward = None
        self._kind = "leaf"
        self._kink = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, kind={self._kind!r}{flag})"

    def zero_grad(self):
        if self.grad is not None:
            self.grad[...] = 0

    # -- graph construction --------------------------------------------------

    @staticmethod
    def _node(data, parents, backward, kind, kink=None):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.requires_grad = any(p.requires_grad for p in parents)
        out.grad = None
        out._kind = kind
        if out.requires_grad:
            out._parents = tuple(parents)
            out._backward = backward
            out._kink = kink
        else:
            out._parents = ()
            out._backward = None
            out._kink = None
        return out

    def _coerce(self, other):
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- backward pass -------------------------------------------------------

    def backward(self):
        """Backpropagate from this scalar through the recorded graph.

        Leaf gradients accumulate across calls; interior gradients are
        reset at the start of every pass.
        """
        if self.data.size != 1:
            raise ValueError(f"backward: loss must be scalar, got shape {self.data.shape}")
        if not self.requires_grad:
            return
        order = _toposort(self)
        for node in order:
            if node._backward is not None:
                node.grad = np.zeros_like(node.data)
            elif node.grad is None:
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None:
                node._backward(node.grad)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        b = self._coerce(other)
        a = self
        try:
            data = a.data + b.data
        except ValueError:
            raise ShapeError(f"add: operands have incompatible shapes {a.shape} and {b.shape}") from None

        def bwd(g):
            if a.requires_grad:
                a.grad += _unbroadcast(g, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(g, b.data.shape)

        return Tensor._node(data, (a, b), bwd, "add")

    __radd__ = __add__

    def __sub__(self, other):
        b = self._coerce(other)
        a = self
        try:
            data = a.data - b.data
        except ValueError:
            raise ShapeError(f"sub: operands have incompatible shapes {a.shape} and {b.shape}") from None

        def bwd(g):
            if a.requires_grad:
                a.grad += _unbroadcast(g, a.data.shape)
            if b.requires_grad:
                b.grad -= _unbroadcast(g, b.data.shape)

        return Tensor._node(data, (a, b), bwd, "sub")

    def __rsub__(self, other):
        return self._coerce(other) - self

    def __mul__(self, other):
        b = self._coerce(other)
        a = self
        try:
            data = a.data * b.data
        except ValueError:
            raise ShapeError(f"mul: operands have incompatible shapes {a.shape} and {b.shape}") from None

        def bwd(g):
            if a.requires_grad:
                a.grad += _unbroadcast(g * b.data, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(g * a.data, b.data.shape)

        return Tensor._node(data, (a, b), bwd, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        b = self._coerce(other)
        a = self
        try:
            data = a.data / b.data
        except ValueError:
            raise ShapeError(f"div: operands have incompatible shapes {a.shape} and {b.shape}") from None

        def bwd(g):
            if a.requires_grad:
                a.grad += _unbroadcast(g / b.data, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape)

        return Tensor._node(data, (a, b), bwd, "div")

    def __rtruediv__(self, other):
        return self._coerce(other) / self

    def __neg__(self):
        a = self

        def bwd(g):
            if a.requires_grad:
                a.grad -= g

        return Tensor._node(-a.data, (a,), bwd, "neg")

    def __pow__(self, exponent):
        if isinstance(exponent, Tensor):
            return _pow_tensor(self, exponent)
        a = self
        e = float(exponent)
        data = a.data ** e

        def bwd(g):
            if a.requires_grad:
                a.grad += g * e * a.data ** (e - 1.0)

        return Tensor._node(data, (a,), bwd, "pow")

    # -- elementwise functions -----------------------------------------------

    def exp(self):
        a = self
        data = np.exp(a.data)

        def bwd(g):
            if a.requires_grad:
                a.grad += g * data

        return Tensor._node(data, (a,), bwd, "exp")

    def log(self):
        a = self
        data = np.log(a.data)

        def bwd(g):
            if a.requires_grad:
                a.grad += g / a.data

        return Tensor._node(data, (a,), bwd, "log")

    def sqrt(self):
        a = self
        data = np.sqrt(a.data)

        def bwd(g):
            if a.requires_grad:
                a.grad += g * 0.5 / data

        return Tensor._node(data, (a,), bwd, "sqrt")

    def relu(self):
        a = self
        mask = a.data > 0  # subgradient at 0 is 0
        data = np.where(mask, a.data, 0.0).astype(a.data.dtype)

        def bwd(g):
            if a.requires_grad:
                a.grad += g * mask

        def kink():
            return float(np.min(np.abs(a.data))) if a.data.size else float("inf")

        return Tensor._node(data, (a,), bwd, "relu", kink)

    def sigmoid(self):
        a = self
        data = np.empty_like(a.data)
        pos = a.data >= 0
        data[pos] = 1.0 / (1.0 + np.exp(-a.data[pos]))
        ez = np.exp(a.data[~pos])
        data[~pos] = ez / (1.0 + ez)

        def bwd(g):
            if a.requires_grad:
                a.grad += g * data * (1.0 - data)

        return Tensor._node(data, (a,), bwd, "sigmoid")

    def tanh(self):
        a = self
        data = np.tanh(a.data)

        def bwd(g):
            if a.requires_grad:
                a.grad += g * (1.0 - data * data)

        return Tensor._node(data, (a,), bwd, "tanh")

    def clip(self, lo=None, hi=None):
        """Clamp values to [lo, hi]; subgradient 0 outside and at the bounds."""
        if lo is None and hi is None:
            raise ValueError("clip: need at least one bound")
        a = self
        data = np.clip(a.data, lo, hi)
        inside = np.ones(a.data.shape, dtype=bool)
        if lo is not None:
            inside &= a.data > lo
        if hi is not None:
            inside &= a.data < hi

        def bwd(g):
            if a.requires_grad:
                a.grad += g * inside

        def kink():
            m = float("inf")
            if a.data.size:
                if lo is not None:
                    m = min(m, float(np.min(np.abs(a.data - lo))))
                if hi is not None:
                    m = min(m, float(np.min(np.abs(a.data - hi))))
            return m

        return Tensor._node(data, (a,), bwd, "clip", kink)

    # -- reductions ----------------------------------------------------------

    def sum(self, axes=None, keepdims=False):
        a = self
        ax = _norm_axes(axes, a.ndim)
        data = a.data.sum(axis=ax, keepdims=keepdims)

        def bwd(g):
            if a.requires_grad:
                a.grad += _expand_reduced(g, a.data.shape, ax, keepdims)

        return Tensor._node(data, (a,), bwd, "sum")

    def mean(self, axes=None, keepdims=False):
        a = self
        ax = _norm_axes(axes, a.ndim)
        data = a.data.mean(axis=ax, keepdims=keepdims)
        count = a.data.size // max(data.size, 1)

        def bwd(g):
            if a.requires_grad:
                a.grad += _expand_reduced(g, a.data.shape, ax, keepdims) / count

        return Tensor._node(data, (a,), bwd, "mean")

    def max(self, axes=None, keepdims=False):
        """Max over axes; ties route the gradient to the first maximal
        element in row-major order."""
        a = self
        ax = _norm_axes(axes, a.ndim)
        if ax is None:
            ax = tuple(range(a.ndim))
        data = a.data.max(axis=ax, keepdims=keepdims)
        lead = tuple(i for i in range(a.ndim) if i not in ax)
        moved = np.transpose(a.data, lead + ax)
        lead_shape = moved.shape[: len(lead)]
        flat = moved.reshape(lead_shape + (-1,))
        arg = np.argmax(flat, axis=-1)

        def bwd(g):
            if not a.requires_grad:
                return
            gr = np.asarray(g).reshape(lead_shape)
            zf = np.zeros_like(flat)
            np.put_along_axis(zf, arg[..., None], gr[..., None], axis=-1)
            zm = zf.reshape(moved.shape)
            inv = np.argsort(lead + ax)
            a.grad += np.transpose(zm, inv)

        def kink():
            if flat.shape[-1] < 2:
                return float("inf")
            part = np.partition(flat, flat.shape[-1] - 2, axis=-1)
            return float(np.min(part[..., -1] - part[..., -2]))

        return Tensor._node(data, (a,), bwd, "max", kink)

    def softmax(self, axis=-1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        ez = np.exp(shifted)
        data = ez / ez.sum(axis=axis, keepdims=True)

        def bwd(g):
            if a.requires_grad:
                dot = (g * data).sum(axis=axis, keepdims=True)
                a.grad += (g - dot) * data

        return Tensor._node(data, (a,), bwd, "softmax")

    def logsumexp(self, axis=-1, keepdims=False):
        a = self
        m = a.data.max(axis=axis, keepdims=True)
        ez = np.exp(a.data - m)
        s = ez.sum(axis=axis, keepdims=True)
        full = m + np.log(s)
        data = full if keepdims else np.squeeze(full, axis=axis)
        soft = ez / s

        def bwd(g):
            if a.requires_grad:
                ge = g if keepdims else np.expand_dims(g, axis)
                a.grad += ge * soft

        return Tensor._node(data, (a,), bwd, "logsumexp")

    # -- shape manipulation --------------------------------------------------

    def reshape(self, shape):
        a = self
        data = a.data.reshape(shape)

        def bwd(g):
            if a.requires_grad:
                a.grad += g.reshape(a.data.shape)

        return Tensor._node(data, (a,), bwd, "reshape")

    def narrow(self, axis, start, length):
        """Contiguous slice [start, start+length) along ``axis``."""
        a = self
        n = a.data.shape[axis]
        if start < 0 or length < 1 or start + length > n:
            raise ShapeError(
                f"narrow: slice [{start}, {start + length}) outside axis {axis} of shape {a.shape}"
            )
        idx = [slice(None)] * a.ndim
        idx[axis] = slice(start, start + length)
        idx = tuple(idx)
        data = a.data[idx].copy()

        def bwd(g):
            if a.requires_grad:
                a.grad[idx] += g

        return Tensor._node(data, (a,), bwd, "narrow")


def concat(tensors, axis=0):
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: empty input list")
    ref = tensors[0].data.shape
    for t in tensors[1:]:
        s = t.data.shape
        if len(s) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(s, ref)) if i != axis):
            raise ShapeError(f"concat: incompatible shapes {ref} and {s} along axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, o, n in zip(tensors, offsets, sizes):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(o, o + n)
                t.grad += g[tuple(idx)]

    return Tensor._node(data, tuple(tensors), bwd, "concat")


def matmul(a, b, ta=False, tb=False):
    """2-D matrix product with optional operand transposes."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    af = a.data.T if ta else a.data
    bf = b.data.T if tb else b.data
    if af.shape[1] != bf.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape} (ta={ta}, tb={tb})")
    data = af @ bf

    def bwd(g):
        if a.requires_grad:
            ga = g @ bf.T
            a.grad += ga.T if ta else ga
        if b.requires_grad:
            gb = af.T @ g
            b.grad += gb.T if tb else gb

    return Tensor._node(data, (a, b), bwd, "matmul")


def _pow_tensor(base, expo):
    """base ** expo with a tensor exponent; base must be positive."""
    a, e = base, expo
    try:
        data = a.data ** e.data
    except ValueError:
        raise ShapeError(f"pow: operands have incompatible shapes {a.shape} and {e.shape}") from None

    def bwd(g):
        if a.requires_grad:
            a.grad += _unbroadcast(g * e.data * a.data ** (e.data - 1.0), a.data.shape)
        if e.requires_grad:
            e.grad += _unbroadcast(g * data * np.log(a.data), e.data.shape)

    return Tensor._node(data, (a, e), bwd, "pow")


def conv2d(x, w, stride=1, padding=0):
    """Batched 2-D cross-correlation.

    x: [N, Cin, H, W], w: [Cout, Cin, kh, kw] -> [N, Cout, oh, ow].
    Implemented as im2col plus one matrix product per call; the column
    matrix is kept for the weight gradient.
    """
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D operands, got {x.shape} and {w.shape}")
    n, cin, h, wd = x.data.shape
    cout, cin2, kh, kw = w.data.shape
    if cin != cin2:
        raise ShapeError(f"conv2d: channel mismatch between input {x.shape} and kernel {w.shape}")
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    hp, wp = h + 2 * padding, wd + 2 * padding
    if kh > hp or kw > wp:
        raise ShapeError(
            f"conv2d: kernel ({kh}, {kw}) larger than padded input ({hp}, {wp})"
        )
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # [N, Cin, oh, ow, kh, kw]
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, cin * kh * kw)
    wm = w.data.reshape(cout, -1)
    data = (cols @ wm.T).reshape(n, oh, ow, cout).transpose(0, 3, 1, 2)
    data = np.ascontiguousarray(data)

    def bwd(g):
        gm = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * oh * ow, cout)
        if w.requires_grad:
            w.grad += (gm.T @ cols).reshape(w.data.shape)
        if x.requires_grad:
            dcols = gm @ wm  # [N*oh*ow, Cin*kh*kw]
            d6 = dcols.reshape(n, oh, ow, cin, kh, kw).transpose(0, 3, 4, 5, 1, 2)
            dxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += d6[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding : padding + h, padding : padding + wd]
            x.grad += dxp

    return Tensor._node(data, (x, w), bwd, "conv2d")


def affine_sample(image, params, out_h, out_w):
    """Constrained-affine bilinear sampling.

    image: [N, C, H, W]; params: [N, 4] rows (s_x, s_y, t_x, t_y).
    Source coords are x_s = s_x * x_t + t_x (same for y) over a target
    grid spanning [-1, 1] whose endpoints align with corner pixels.
    Out-of-bounds reads are zero.  Differentiable with respect to both
    the image and the parameters; the transform has no rotation term,
    so interpolation separates into a row pass and a column pass.
    """
    if image.data.ndim != 4:
        raise ShapeError(f"affine_sample: expected 4-D image, got {image.shape}")
    if params.data.ndim != 2 or params.data.shape[1] != 4:
        raise ShapeError(f"affine_sample: expected [N, 4] params, got {params.shape}")
    n, c, h, w = image.data.shape
    if params.data.shape[0] != n:
        raise ShapeError(
            f"affine_sample: batch mismatch between image {image.shape} and params {params.shape}"
        )
    if out_h < 1 or out_w < 1:
        raise ValueError(f"affine_sample: output size ({out_h}, {out_w}) must be positive")

    dt = image.data.dtype
    xt = np.linspace(-1.0, 1.0, out_w, dtype=dt) if out_w > 1 else np.zeros(1, dtype=dt)
    yt = np.linspace(-1.0, 1.0, out_h, dtype=dt) if out_h > 1 else np.zeros(1, dtype=dt)
    p = params.data
    xs = p[:, 0:1] * xt[None, :] + p[:, 2:3]  # [N, out_w]
    ys = p[:, 1:2] * yt[None, :] + p[:, 3:4]  # [N, out_h]
    px = (xs + 1.0) * ((w - 1) / 2.0)
    py = (ys + 1.0) * ((h - 1) / 2.0)

    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    fx = (px - x0).astype(dt)
    fy = (py - y0).astype(dt)
    vx0 = ((x0 >= 0) & (x0 <= w - 1)).astype(dt)
    vx1 = ((x0 + 1 >= 0) & (x0 + 1 <= w - 1)).astype(dt)
    vy0 = ((y0 >= 0) & (y0 <= h - 1)).astype(dt)
    vy1 = ((y0 + 1 >= 0) & (y0 + 1 <= h - 1)).astype(dt)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    wx0 = (1.0 - fx) * vx0
    wx1 = fx * vx1
    wy0 = (1.0 - fy) * vy0
    wy1 = fy * vy1

    r0 = np.take_along_axis(image.data, y0c[:, None, :, None], axis=2)  # [N,C,out_h,W]
    r1 = np.take_along_axis(image.data, y1c[:, None, :, None], axis=2)
    rows = r0 * wy0[:, None, :, None] + r1 * wy1[:, None, :, None]
    c0 = np.take_along_axis(rows, x0c[:, None, None, :], axis=3)  # [N,C,out_h,out_w]
    c1 = np.take_along_axis(rows, x1c[:, None, None, :], axis=3)
    data = c0 * wx0[:, None, None, :] + c1 * wx1[:, None, None, :]

    def bwd(g):
        if params.requires_grad:
            # d out / d px, summed over channels and rows
            gpx = (g * (c1 * vx1[:, None, None, :] - c0 * vx0[:, None, None, :])).sum(axis=(1, 2))
            rd = r1 * vy1[:, None, :, None] - r0 * vy0[:, None, :, None]
            rd0 = np.take_along_axis(rd, x0c[:, None, None, :], axis=3)
            rd1 = np.take_along_axis(rd, x1c[:, None, None, :], axis=3)
            gpy = (g * (rd0 * wx0[:, None, None, :] + rd1 * wx1[:, None, None, :])).sum(axis=(1, 3))
            kx = (w - 1) / 2.0
            ky = (h - 1) / 2.0
            params.grad[:, 0] += (gpx * xt[None, :]).sum(axis=1) * kx
            params.grad[:, 2] += gpx.sum(axis=1) * kx
            params.grad[:, 1] += (gpy * yt[None, :]).sum(axis=1) * ky
            params.grad[:, 3] += gpy.sum(axis=1) * ky
        if image.requires_grad:
            ni = np.arange(n)[:, None, None, None]
            ci = np.arange(c)[None, :, None, None]
            oi = np.arange(out_h)[None, None, :, None]
            drows = np.zeros((n, c, out_h, w), dtype=g.dtype)
            np.add.at(drows, (ni, ci, oi, x0c[:, None, None, :]), g * wx0[:, None, None, :])
            np.add.at(drows, (ni, ci, oi, x1c[:, None, None, :]), g * wx1[:, None, None, :])
            wi = np.arange(w)[None, None, None, :]
            dimg = np.zeros_like(image.data)
            np.add.at(dimg, (ni, ci, y0c[:, None, :, None], wi), drows * wy0[:, None, :, None])
            np.add.at(dimg, (ni, ci, y1c[:, None, :, None], wi), drows * wy1[:, None, :, None])
            image.grad += dimg

    def kink():
        dx = np.abs(px - np.rint(px))
        dy = np.abs(py - np.rint(py))
        return float(min(dx.min(), dy.min()))

    return Tensor._node(data, (image, params), bwd, "affine_sample", kink)


# -- helpers ----------------------------------------------------------------


def _norm_axes(axes, ndim):
    if axes is None:
        return None
    if isinstance(axes, int):
        axes = (axes,)
    return tuple(sorted(a % ndim for a in axes))


def _expand_reduced(g, shape, axes, keepdims):
    """Broadcast a reduced gradient back to the pre-reduction shape."""
    if axes is None:
        return np.broadcast_to(g, shape)
    if not keepdims:
        for a in axes:
            g = np.expand_dims(g, a)
    return np.broadcast_to(g, shape)


def _toposort(root):
    order = []
    state = {}  # id -> 0 visiting, 1 done
    stack = [(root, iter(root._parents))]
    state[id(root)] = 0
    while stack:
        node, it = stack[-1]
        advanced = False
        for parent in it:
            if not parent.requires_grad:
                continue
            s = state.get(id(parent))
            if s is None:
                state[id(parent)] = 0
                stack.append((parent, iter(parent._parents)))
                advanced = True
                break
            if s == 0:
                raise ValueError("backward: graph contains a cycle")
        if not advanced:
            stack.pop()
            state[id(node)] = 1
            order.append(node)
    return order


def graph_nodes(root):
    """All tensors on gradient-carrying paths into ``root``, in
    topological order (inputs first)."""
    if not root.requires_grad:
        return [root]
    return _toposort(root)
