"""Dense tensors with reverse-mode automatic differentiation on top of numpy.

Every operation builds a node in an acyclic graph; calling ``backward`` on a
scalar loss walks the graph in reverse topological order and accumulates
gradients into every reachable tensor that requires them. Convolution and its
transpose are expressed as GEMMs over im2col patches, with the input-gradient
passes rewritten as convolutions over zero-dilated tensors so the inner GEMM
dimension stays large on narrow networks.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "Parameter",
    "ShapeError",
    "activation",
    "avg_pool2d",
    "backward",
    "conv2d",
    "global_avg_pool",
    "log_sum_exp",
    "matmul",
    "pad_channels",
    "relu",
    "leaky_relu",
    "softplus",
    "tanh",
    "transposed_conv2d",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible with an operation."""


def _as_array(data, dtype=None):
    arr = np.asarray(data)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return arr


class Tensor:
    """N-dimensional float tensor participating in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_flow")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = _as_array(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward
        self._flow = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, requires_grad={self.requires_grad})"

    def detach(self):
        """Copy of this tensor's value cut loose from the graph."""
        return Tensor(self.data.copy())

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    # -- graph plumbing ----------------------------------------------------

    def _accumulate(self, g):
        """Add a gradient contribution to this node's per-sweep flow buffer."""
        if self._flow is None:
            self._flow = np.zeros_like(self.data)
        self._flow += g

    def backward(self):
        """Reverse-mode sweep from a scalar; accumulates into ``.grad`` fields.

        Gradients propagate through per-sweep flow buffers, so calling
        backward again on an intact graph adds one more unit of gradient
        rather than compounding stale values.
        """
        if self.data.size != 1:
            raise ShapeError(
                f"backward requires a scalar loss, got shape {self.data.shape}"
            )
        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            g = node._flow
            if g is None:
                continue
            node._flow = None
            node.grad = g if node.grad is None else node.grad + g
            if node._backward is not None:
                node._backward(g)

    # -- operator sugar ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(_wrap(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(_wrap(other, self.dtype), self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_wrap(other, self.dtype), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow_const(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class Parameter:
    """Named trainable tensor; frozen parameters never receive gradients."""

    __slots__ = ("tensor", "name", "trainable")

    def __init__(self, data, name, trainable=True):
        self.tensor = Tensor(data, requires_grad=trainable)
        self.name = name
        self.trainable = bool(trainable)

    @property
    def data(self):
        return self.tensor.data

    @data.setter
    def data(self, value):
        self.tensor.data = _as_array(value, self.tensor.data.dtype)

    @property
    def grad(self):
        return self.tensor.grad

    def zero_grad(self):
        self.tensor.grad = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.tensor.shape}, trainable={self.trainable})"


def _wrap(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(_as_array(value, dtype))


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _binary(a, b, out_data, da, db):
    out = Tensor(
        out_data,
        requires_grad=a.requires_grad or b.requires_grad,
        _parents=(a, b),
    )
    if out.requires_grad:

        def _bw(g):
            if a.requires_grad:
                a._accumulate(_unbroadcast(da(g), a.data.shape))
            if b.requires_grad:
                b._accumulate(_unbroadcast(db(g), b.data.shape))

        out._backward = _bw
    return out


def _unary(a, out_data, da):
    out = Tensor(out_data, requires_grad=a.requires_grad, _parents=(a,))
    if out.requires_grad:
        out._backward = lambda g: a._accumulate(da(g))
    return out


# -- elementwise -----------------------------------------------------------


def add(a, b):
    a = _wrap(a, None)
    b = _wrap(b, a.dtype)
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a, b):
    a = _wrap(a, None)
    b = _wrap(b, a.dtype)
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a, b):
    a = _wrap(a, None)
    b = _wrap(b, a.dtype)
    return _binary(a, b, a.data * b.data, lambda g: g * b.data, lambda g: g * a.data)


def div(a, b):
    a = _wrap(a, None)
    b = _wrap(b, a.dtype)
    return _binary(
        a,
        b,
        a.data / b.data,
        lambda g: g / b.data,
        lambda g: -g * a.data / (b.data * b.data),
    )


def neg(a):
    return _unary(a, -a.data, lambda g: -g)


def pow_const(a, exponent):
    e = float(exponent)
    out_data = a.data**e
    return _unary(a, out_data, lambda g: g * e * a.data ** (e - 1.0))


def texp(a):
    out_data = np.exp(a.data)
    return _unary(a, out_data, lambda g: g * out_data)


def tlog(a):
    return _unary(a, np.log(a.data), lambda g: g / a.data)


def tsqrt(a):
    out_data = np.sqrt(a.data)
    return _unary(a, out_data, lambda g: g / (2.0 * out_data))


def tabs(a):
    return _unary(a, np.abs(a.data), lambda g: g * np.sign(a.data))


def tanh(a):
    out_data = np.tanh(a.data)
    return _unary(a, out_data, lambda g: g * (1.0 - out_data * out_data))


def relu(a):
    mask = a.data > 0
    return _unary(a, np.where(mask, a.data, 0.0), lambda g: g * mask)


def leaky_relu(a, slope=0.2):
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must be in (0, 1), got {slope}")
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return _unary(a, a.data * factor, lambda g: g * factor)


def softplus(a):
    """log(1 + e^x) computed without overflow; gradient is the sigmoid."""
    x = a.data
    out_data = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))

    def _da(g):
        return g / (1.0 + np.exp(-x))

    return _unary(a, out_data.astype(a.dtype, copy=False), _da)


def activation(a, kind, slope=0.2):
    """Elementwise nonlinearity selected by name: relu, leaky_relu or tanh."""
    if kind == "relu":
        return relu(a)
    if kind == "leaky_relu":
        return leaky_relu(a, slope)
    if kind == "tanh":
        return tanh(a)
    raise ValueError(f"unknown activation kind {kind!r}")


# -- reductions and shape ops ------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def _da(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.data.shape).copy()

    return _unary(a, out_data, _da)


def tmean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    elif isinstance(axis, tuple):
        count = int(np.prod([a.data.shape[ax] for ax in axis]))
    else:
        count = a.data.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(a, shape):
    old_shape = a.data.shape
    return _unary(a, a.data.reshape(shape), lambda g: g.reshape(old_shape))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    inverse = np.argsort(axes)
    return _unary(a, a.data.transpose(axes), lambda g: g.transpose(inverse))


def matmul(a, b):
    a = _wrap(a, None)
    b = _wrap(b, a.dtype)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(
            f"matmul expects 2-D operands, got {a.data.shape} @ {b.data.shape}"
        )
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    return _binary(
        a,
        b,
        a.data @ b.data,
        lambda g: g @ b.data.T,
        lambda g: a.data.T @ g,
    )


def pad_channels(a, channels):
    """Zero-pad NCHW (or NC) input along the channel axis up to ``channels``."""
    c = a.data.shape[1]
    if channels < c:
        raise ShapeError(f"pad_channels cannot shrink {c} -> {channels}")
    if channels == c:
        return a
    widths = [(0, 0)] * a.data.ndim
    widths[1] = (0, channels - c)
    out_data = np.pad(a.data, widths)
    return _unary(a, out_data, lambda g: g[:, :c].copy())


# -- convolution machinery ---------------------------------------------------


def _conv_out_extent(extent, kernel, stride, pad):
    return (extent + 2 * pad - kernel) // stride + 1


def _im2col(xp, kernel, stride, ho, wo):
    """(N, C, Hp, Wp) padded input -> (N, C*K*K, Ho*Wo) patch matrix."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kernel, kernel, ho, wo), dtype=xp.dtype)
    for i in range(kernel):
        for j in range(kernel):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kernel * kernel, ho * wo)


def _conv_forward_data(x, w, stride, pad):
    """Plain correlation of (N,C,H,W) with (O,C,K,K); returns data array."""
    n, c, h, wd = x.shape
    o, ci, k, _ = w.shape
    ho = _conv_out_extent(h, k, stride, pad)
    wo = _conv_out_extent(wd, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = _im2col(xp, k, stride, ho, wo)
    out = np.matmul(w.reshape(o, ci * k * k), cols)
    return out.reshape(n, o, ho, wo), cols


def _dilate(x, stride, extra_bottom=0, extra_right=0):
    """Insert stride-1 zeros between spatial elements, plus trailing zeros."""
    if stride == 1 and extra_bottom == 0 and extra_right == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros(
        (n, c, (h - 1) * stride + 1 + extra_bottom, (w - 1) * stride + 1 + extra_right),
        dtype=x.dtype,
    )
    out[:, :, 0 : (h - 1) * stride + 1 : stride, 0 : (w - 1) * stride + 1 : stride] = x
    return out


def _flip_swap(w):
    """(O, I, K, K) -> (I, O, K, K) with both spatial axes flipped."""
    return np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


def _conv_input_grad(g, w, stride, pad, h, wd):
    """Gradient of a conv w.r.t. its (N,C,H,W) input, as a dilated conv."""
    k = w.shape[2]
    # Dilating the output gradient and convolving with the flipped kernel is
    # the exact adjoint; trailing zeros cover strides that do not divide the
    # padded extent evenly.
    extra_h = h + 2 * pad - k - stride * (g.shape[2] - 1)
    extra_w = wd + 2 * pad - k - stride * (g.shape[3] - 1)
    gd = _dilate(g, stride, extra_h, extra_w)
    pk = k - 1 - pad
    if pk > 0:
        gd = np.pad(gd, ((0, 0), (0, 0), (pk, pk), (pk, pk)))
    elif pk < 0:
        gd = gd[:, :, -pk:pk, -pk:pk]
    out, _ = _conv_forward_data(gd, _flip_swap(w), 1, 0)
    return out


def conv2d(x, w, stride=1, pad=0):
    """2-D correlation: NCHW input, OIKK weight; differentiable in both."""
    x = _wrap(x, None)
    w = _wrap(w, x.dtype)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"conv2d expects NCHW input and OIKK weight, got {x.data.shape} and {w.data.shape}"
        )
    n, c, h, wd = x.data.shape
    o, ci, k, k2 = w.data.shape
    if k != k2:
        raise ShapeError(f"conv2d kernels must be square, got {w.data.shape}")
    if c != ci:
        raise ShapeError(
            f"conv2d channel mismatch: input has {c} channels, weight expects {ci}"
        )
    if h + 2 * pad < k or wd + 2 * pad < k:
        raise ShapeError(
            f"conv2d kernel {k} does not fit padded input {h + 2 * pad}x{wd + 2 * pad}"
        )
    out_data, cols = _conv_forward_data(x.data, w.data, stride, pad)

    out = Tensor(out_data, requires_grad=x.requires_grad or w.requires_grad, _parents=(x, w))
    if out.requires_grad:

        def _bw(g):
            gm = g.reshape(n, o, -1)
            if w.requires_grad:
                gw = np.tensordot(gm, cols, axes=([0, 2], [0, 2]))
                w._accumulate(gw.reshape(o, ci, k, k))
            if x.requires_grad:
                x._accumulate(_conv_input_grad(g, w.data, stride, pad, h, wd))

        out._backward = _bw
    return out


def transposed_conv2d(x, w, stride=1, pad=0, out_hw=None):
    """Adjoint of conv2d. Weight is (Cin, Cout, K, K) for a Cin -> Cout map.

    With odd kernels and pad == K // 2 the default output extent is
    ``stride * H`` (so stride 2 doubles the map); pass ``out_hw`` to pin any
    other consistent target extent.
    """
    x = _wrap(x, None)
    w = _wrap(w, x.dtype)
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ShapeError(
            f"transposed_conv2d expects NCHW input and IOKK weight, got {x.data.shape} and {w.data.shape}"
        )
    n, c, h, wd = x.data.shape
    ci, co, k, k2 = w.data.shape
    if k != k2:
        raise ShapeError(f"transposed_conv2d kernels must be square, got {w.data.shape}")
    if c != ci:
        raise ShapeError(
            f"transposed_conv2d channel mismatch: input has {c} channels, weight expects {ci}"
        )
    if out_hw is None:
        if pad == k // 2:
            out_hw = (h * stride, wd * stride)
        else:
            out_hw = ((h - 1) * stride - 2 * pad + k, (wd - 1) * stride - 2 * pad + k)
    ht, wt = out_hw
    if _conv_out_extent(ht, k, stride, pad) != h or _conv_out_extent(wt, k, stride, pad) != wd:
        raise ShapeError(
            f"transposed_conv2d target {ht}x{wt} is not consistent with input "
            f"{h}x{wd}, kernel {k}, stride {stride}, pad {pad}"
        )

    # Forward pass as a stride-1 conv over the zero-dilated input.
    extra_h = ht + 2 * pad - k - stride * (h - 1)
    extra_w = wt + 2 * pad - k - stride * (wd - 1)
    xd = _dilate(x.data, stride, extra_h, extra_w)
    pk = k - 1 - pad
    if pk > 0:
        xd = np.pad(xd, ((0, 0), (0, 0), (pk, pk), (pk, pk)))
    elif pk < 0:
        xd = xd[:, :, -pk:pk, -pk:pk]
    out_data, _ = _conv_forward_data(xd, _flip_swap(w.data), 1, 0)

    out = Tensor(out_data, requires_grad=x.requires_grad or w.requires_grad, _parents=(x, w))
    if out.requires_grad:

        def _bw(g):
            gp = np.pad(g, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g
            if x.requires_grad:
                gx, _ = _conv_forward_data(g, w.data, stride, pad)
                x._accumulate(gx)
            if w.requires_grad:
                cols_g = _im2col(gp, k, stride, h, wd)
                gw = np.tensordot(x.data.reshape(n, c, -1), cols_g, axes=([0, 2], [0, 2]))
                w._accumulate(gw.reshape(ci, co, k, k))

        out._backward = _bw
    return out


def avg_pool2d(x, factor):
    """Uniform non-overlapping average pooling by an integer factor."""
    x = _wrap(x, None)
    n, c, h, w = x.data.shape
    if h % factor or w % factor:
        raise ShapeError(f"avg_pool2d factor {factor} does not divide {h}x{w}")
    ho, wo = h // factor, w // factor
    out_data = x.data.reshape(n, c, ho, factor, wo, factor).mean(axis=(3, 5))

    def _da(g):
        g = g / (factor * factor)
        return np.broadcast_to(
            g[:, :, :, None, :, None], (n, c, ho, factor, wo, factor)
        ).reshape(n, c, h, w).copy()

    return _unary(x, out_data, _da)


def global_avg_pool(x):
    """Spatial mean per channel: NCHW -> NC."""
    x = _wrap(x, None)
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.data.shape}")
    return tmean(x, axis=(2, 3))


def log_sum_exp(x, axis, keepdims=False):
    """Max-shifted log-sum-exp along an axis; exact and overflow-free."""
    x = _wrap(x, None)
    if axis < 0:
        axis += x.data.ndim
    if x.data.shape[axis] == 0:
        raise ShapeError("log_sum_exp over an empty axis")
    shift = np.max(x.data, axis=axis, keepdims=True)
    shift = np.where(np.isfinite(shift), shift, 0.0)
    shifted = sub(x, Tensor(shift))
    out = add(tlog(tsum(texp(shifted), axis=axis, keepdims=True)), Tensor(shift))
    if not keepdims:
        squeezed = tuple(s for i, s in enumerate(out.data.shape) if i != axis)
        out = reshape(out, squeezed)
    return out


def backward(loss):
    """Module-level alias: reverse sweep from a scalar loss tensor."""
    loss.backward()
