"""Network building blocks: convolutions, batch norm, dropout, pooling, FC,
and the shortcut-plus-scaled-block container produced by network growth.

Models are ordered layer chains. A forward pass runs in one of three modes:
``train`` (batch statistics, dropout active), ``eval`` (running statistics,
dropout off) and ``calibrate`` (eval behaviour except that batch-norm layers
whose running statistics have never been measured absorb the batch statistics
of this single pass).
"""
from __future__ import annotations

import numpy as np

from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    activation,
    avg_pool2d,
    conv2d,
    global_avg_pool,
    matmul,
    pad_channels,
    transposed_conv2d,
)

TRAIN = "train"
EVAL = "eval"
CALIBRATE = "calibrate"

LEAKY_SLOPE = 0.2
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class UninitializedStatsError(RuntimeError):
    """Eval-mode batch norm was asked to run before any statistics exist."""


class Context:
    """Per-forward settings: mode and the RNG feeding dropout masks."""

    __slots__ = ("mode", "rng")

    def __init__(self, mode=EVAL, rng=None):
        if mode not in (TRAIN, EVAL, CALIBRATE):
            raise ValueError(f"unknown forward mode {mode!r}")
        self.mode = mode
        self.rng = rng


def xavier_uniform(shape, fan_in, fan_out, rng, dtype=np.float64):
    limit = float(np.sqrt(6.0 / (fan_in + fan_out)))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2d:
    def __init__(self, name, in_channels, out_channels, kernel, stride, rng=None, dtype=np.float64):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = kernel // 2
        fan = kernel * kernel
        data = (
            xavier_uniform(
                (out_channels, in_channels, kernel, kernel),
                in_channels * fan,
                out_channels * fan,
                rng,
                dtype,
            )
            if rng is not None
            else np.zeros((out_channels, in_channels, kernel, kernel), dtype)
        )
        self.weight = Parameter(data, f"{name}/weight")

    def forward(self, x, ctx):
        return conv2d(x, self.weight.tensor, self.stride, self.pad)

    def params(self):
        return [self.weight]


class Deconv2d:
    """Transposed convolution; stride 2 doubles the spatial extent."""

    def __init__(self, name, in_channels, out_channels, kernel, stride, rng=None, dtype=np.float64, bias=False):
        self.name = name
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = kernel // 2
        fan = kernel * kernel
        data = (
            xavier_uniform(
                (in_channels, out_channels, kernel, kernel),
                in_channels * fan,
                out_channels * fan,
                rng,
                dtype,
            )
            if rng is not None
            else np.zeros((in_channels, out_channels, kernel, kernel), dtype)
        )
        self.weight = Parameter(data, f"{name}/weight")
        self.bias = Parameter(np.zeros(out_channels, dtype), f"{name}/bias") if bias else None

    def forward(self, x, ctx):
        out = transposed_conv2d(x, self.weight.tensor, self.stride, self.pad)
        if self.bias is not None:
            out = out + self.bias.tensor.reshape(1, self.out_channels, 1, 1)
        return out

    def params(self):
        ps = [self.weight]
        if self.bias is not None:
            ps.append(self.bias)
        return ps


class BatchNorm:
    """Per-channel normalization over (N, H, W) or (N,) batch axes.

    Running statistics start empty for freshly built layers (eval before any
    training raises) and are tracked with an exponential moving average after
    the first measured batch, which is absorbed directly.
    """

    def __init__(self, name, channels, dtype=np.float64, eps=BN_EPS, momentum=BN_MOMENTUM):
        self.name = name
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype), f"{name}/gamma")
        self.beta = Parameter(np.zeros(channels, dtype), f"{name}/beta")
        self.running_mean = None
        self.running_var = None
        self.calibrated = False

    def seed_identity_stats(self, dtype=np.float64):
        """Give uncalibrated layers usable (0, 1) statistics, e.g. after growth."""
        self.running_mean = np.zeros(self.channels, dtype)
        self.running_var = np.ones(self.channels, dtype)
        self.calibrated = False

    def _param_shape(self, x):
        if x.data.ndim == 4:
            return (1, self.channels, 1, 1)
        if x.data.ndim == 2:
            return (1, self.channels)
        raise ShapeError(f"batch norm expects NC or NCHW input, got {x.data.shape}")

    def forward(self, x, ctx):
        if x.data.shape[1] != self.channels:
            raise ShapeError(
                f"{self.name}: input has {x.data.shape[1]} channels, layer has {self.channels}"
            )
        shape = self._param_shape(x)
        axes = (0, 2, 3) if x.data.ndim == 4 else (0,)
        use_batch = ctx.mode == TRAIN or (ctx.mode == CALIBRATE and not self.calibrated)
        if use_batch:
            mu = x.mean(axis=axes, keepdims=True)
            var = ((x - mu) ** 2).mean(axis=axes, keepdims=True)
            batch_mean = mu.data.reshape(self.channels).copy()
            batch_var = var.data.reshape(self.channels).copy()
            if not self.calibrated:
                self.running_mean = batch_mean
                self.running_var = batch_var
                self.calibrated = True
            else:
                m = self.momentum
                self.running_mean = m * self.running_mean + (1 - m) * batch_mean
                self.running_var = m * self.running_var + (1 - m) * batch_var
            xhat = (x - mu) / ((var + self.eps) ** 0.5)
        else:
            if self.running_mean is None:
                raise UninitializedStatsError(
                    f"{self.name}: eval-mode batch norm has no running statistics yet"
                )
            mu = Tensor(self.running_mean.reshape(shape))
            var = Tensor(self.running_var.reshape(shape))
            xhat = (x - mu) / ((var + self.eps) ** 0.5)
        return self.gamma.tensor.reshape(shape) * xhat + self.beta.tensor.reshape(shape)

    def params(self):
        return [self.gamma, self.beta]

    def buffers(self):
        out = {}
        if self.running_mean is not None:
            out[f"{self.name}/running_mean"] = self.running_mean
            out[f"{self.name}/running_var"] = self.running_var
        return out

    def load_buffers(self, table, dtype=None):
        key = f"{self.name}/running_mean"
        if key in table:
            cast = (lambda a: a.astype(dtype)) if dtype is not None else (lambda a: a)
            self.running_mean = cast(table[key])
            self.running_var = cast(table[f"{self.name}/running_var"])


class Activation:
    def __init__(self, name, kind, slope=LEAKY_SLOPE):
        self.name = name
        self.kind = kind
        self.slope = slope

    def forward(self, x, ctx):
        return activation(x, self.kind, self.slope)

    def params(self):
        return []


class Dropout:
    """Inverted dropout; identity outside train mode."""

    def __init__(self, name, rate):
        if not 0.0 < rate < 1.0:
            raise ValueError(f"dropout rate must be in (0, 1), got {rate}")
        self.name = name
        self.rate = rate

    def forward(self, x, ctx):
        if ctx.mode != TRAIN:
            return x
        if ctx.rng is None:
            raise ValueError(f"{self.name}: train-mode dropout needs an RNG in the context")
        keep = 1.0 - self.rate
        mask = (ctx.rng.random(x.data.shape) < keep).astype(x.data.dtype) / keep
        return x * Tensor(mask)

    def params(self):
        return []


class GlobalAvgPool:
    def __init__(self, name):
        self.name = name

    def forward(self, x, ctx):
        return global_avg_pool(x)

    def params(self):
        return []


class Dense:
    def __init__(self, name, in_features, out_features, rng=None, dtype=np.float64):
        self.name = name
        self.in_features = in_features
        self.out_features = out_features
        data = (
            xavier_uniform((in_features, out_features), in_features, out_features, rng, dtype)
            if rng is not None
            else np.zeros((in_features, out_features), dtype)
        )
        self.weight = Parameter(data, f"{name}/weight")
        self.bias = Parameter(np.zeros(out_features, dtype), f"{name}/bias")

    def forward(self, x, ctx):
        return matmul(x, self.weight.tensor) + self.bias.tensor.reshape(1, self.out_features)

    def params(self):
        return [self.weight, self.bias]


class Reshape:
    """Per-sample reshape to (C, H, W)."""

    def __init__(self, name, target):
        self.name = name
        self.target = tuple(target)

    def forward(self, x, ctx):
        return x.reshape((x.data.shape[0],) + self.target)

    def params(self):
        return []


class GrownBlock:
    """Shortcut plus adaptively scaled new block, added ahead of the old tail.

    Computes ``pad(shortcut(x)) + w * pad(block(x))`` where ``w`` comes from
    the growth clock attached at surgery time. The shortcut is the identity,
    or average-pooling plus zero channel padding when the block changes shape.
    """

    def __init__(self, name, layers, clock, shortcut, in_channels, out_channels, pool_factor=1):
        self.name = name
        self.layers = layers
        self.clock = clock
        self.shortcut = shortcut
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.pool_factor = pool_factor

    def forward(self, x, ctx):
        branch = x
        for layer in self.layers:
            branch = layer.forward(branch, ctx)
        short = x
        if self.pool_factor > 1:
            short = avg_pool2d(short, self.pool_factor)
        if short.data.shape[1] < self.out_channels:
            short = pad_channels(short, self.out_channels)
        if branch.data.shape[1] < self.out_channels:
            branch = pad_channels(branch, self.out_channels)
        w = self.clock.scale()
        return short + branch * w

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def batch_norms(self):
        return [l for l in self.layers if isinstance(l, BatchNorm)]


class Model:
    """Ordered layer chain with a role (generator or discriminator) and stage."""

    def __init__(self, layers, role, stage, num_classes, input_shape, spec_rows=None, scale=1.0):
        self.layers = layers
        self.role = role
        self.stage = stage
        self.num_classes = num_classes
        self.input_shape = tuple(input_shape)
        self.spec_rows = list(spec_rows or [])
        self.scale = scale

    def forward(self, x, ctx=None):
        ctx = ctx or Context()
        for layer in self.layers:
            x = layer.forward(x, ctx)
        return x

    def forward_with_features(self, x, ctx=None):
        """Forward pass that also returns the global-average-pool features."""
        ctx = ctx or Context()
        features = None
        for layer in self.layers:
            x = layer.forward(x, ctx)
            if isinstance(layer, GlobalAvgPool):
                features = x
        if features is None:
            raise ShapeError(f"{self.role} model has no global average pooling layer")
        return x, features

    def parameters(self):
        return [p for layer in self.layers for p in layer.params()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def batch_norms(self):
        out = []
        for layer in self.layers:
            if isinstance(layer, BatchNorm):
                out.append(layer)
            elif isinstance(layer, GrownBlock):
                out.extend(layer.batch_norms())
        return out

    def grown_blocks(self):
        return [l for l in self.layers if isinstance(l, GrownBlock)]

    def named_arrays(self):
        """All persistent arrays: parameters plus batch-norm buffers."""
        table = {p.name: p.data for p in self.parameters()}
        for bn in self.batch_norms():
            table.update(bn.buffers())
        return table

    def load_arrays(self, table, dtype=None):
        for p in self.parameters():
            arr = table[p.name]
            p.data = arr if dtype is None else arr.astype(dtype)
        for bn in self.batch_norms():
            bn.load_buffers(table, dtype)

    def param_hash(self):
        import hashlib

        h = hashlib.sha256()
        for p in sorted(self.parameters(), key=lambda p: p.name):
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()
