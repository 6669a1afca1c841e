"""Function-preserving network growth.

A growth step clones a shallow model, inserts a freshly initialized
convolution block behind a shortcut just ahead of the old tail, and blends
the block in through an adaptive scale w(t) = 1 - e^{-t} that rises from
zero as the new stage trains. Because the block contributes nothing at
w = 0 and the shortcut is exact (identity, or average-pool plus zero
channel padding absorbed by the pooling-invariant global average and a
copied-plus-extended tail), the grown model reproduces the shallow model's
outputs bitwise-closely at the moment of surgery.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import netspec as NS
from .tensor import Tensor

DEFAULT_NOISE_STD = 0.01


class GrowthError(ValueError):
    """A growth plan cannot be applied to the given model."""


@dataclass
class GrowthClock:
    """Stage-relative training clock driving the adaptive scale."""

    iters_per_epoch: int
    iters_done_in_stage: int = 0

    def __post_init__(self):
        if self.iters_per_epoch < 1:
            raise ValueError("iters_per_epoch must be at least 1")
        if self.iters_done_in_stage < 0:
            raise ValueError("iters_done_in_stage cannot be negative")

    @property
    def t(self) -> float:
        return self.iters_done_in_stage / self.iters_per_epoch

    def scale(self) -> float:
        return -math.expm1(-self.t)

    def tick(self):
        self.iters_done_in_stage += 1


def adaptive_scale(clock: GrowthClock) -> float:
    """w(t) = 1 - e^{-t}: zero at growth, saturating toward one."""
    return clock.scale()


@dataclass
class GrowthPlan:
    source_stage: str
    target_stage: str
    rows: list
    noise_std: float = DEFAULT_NOISE_STD
    shortcut: str = "identity"

    def __post_init__(self):
        if self.noise_std <= 0:
            raise ValueError("noise_std must be positive")
        if self.shortcut not in ("identity", "pool_and_zero_pad"):
            raise ValueError(f"unknown shortcut kind {self.shortcut!r}")

    def to_text(self):
        lines = [
            f"growth {self.source_stage} -> {self.target_stage}",
            f"shortcut {self.shortcut}",
            f"noise-std {self.noise_std!r}",
        ]
        lines.extend(self.rows)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = lines[0].split()
        if len(head) != 4 or head[0] != "growth" or head[2] != "->":
            raise ValueError(f"bad growth plan header: {lines[0]!r}")
        shortcut = lines[1].split()[1]
        noise_std = float(lines[2].split()[1])
        rows = lines[3:]
        for r in rows:
            NS.parse_layer_spec(r)
        return cls(head[1], head[3], rows, noise_std, shortcut)


def _insert_index(model):
    if model.role == "discriminator":
        for i, layer in enumerate(model.layers):
            if isinstance(layer, (L.Dropout, L.GlobalAvgPool)):
                return i
        raise GrowthError("discriminator has no dropout or pooling tail to grow ahead of")
    last = None
    for i, layer in enumerate(model.layers):
        if isinstance(layer, L.Deconv2d):
            last = i
    if last is None:
        raise GrowthError("generator has no output layer to grow ahead of")
    return last


def _channels_at(model, index):
    channels = model.input_shape[0] if model.role == "discriminator" else None
    for layer in model.layers[:index]:
        if isinstance(layer, (L.Conv2d, L.Deconv2d)):
            channels = layer.out_channels
        elif isinstance(layer, L.Reshape):
            channels = layer.target[0]
        elif isinstance(layer, L.GrownBlock):
            channels = layer.out_channels
    if channels is None:
        raise GrowthError("could not infer the channel count at the insertion point")
    return channels


def plan_for(model, target_stage, noise_std=DEFAULT_NOISE_STD, desk=True):
    """Derive the growth plan taking ``model`` to ``target_stage``."""
    rows = NS.block_rows(model.role, model.stage, target_stage, desk=desk)
    specs = NS.expand_rows([NS.parse_layer_spec(r) for r in rows])
    c_in = _channels_at(model, _insert_index(model))
    c_block = NS.scaled_channels(specs[-1].channels, model.scale)
    factor = 1
    for s in specs:
        factor *= s.stride
    shortcut = "identity" if factor == 1 and c_block <= c_in else "pool_and_zero_pad"
    return GrowthPlan(model.stage, target_stage, rows, noise_std, shortcut)


def _gaussian(rng, shape, std, dtype):
    if rng is None:
        return np.zeros(shape, dtype)
    return (rng.standard_normal(shape) * std).astype(dtype)


def grow_network(shallow, plan: GrowthPlan, rng=None, iters_per_epoch=1):
    """Return a deeper model: shallow weights copied bitwise, a new block
    inserted behind a shortcut, the tail widened if the block adds channels.

    ``rng`` draws the Gaussian initialization of the new block; pass None to
    leave the block at zeros (checkpoint restore overwrites it anyway). The
    shallow model is never mutated; inconsistent plans fail before any copy.
    """
    if shallow.stage != plan.source_stage:
        raise GrowthError(
            f"plan grows from {plan.source_stage!r} but the model is at stage {shallow.stage!r}"
        )
    specs = NS.expand_rows([NS.parse_layer_spec(r) for r in plan.rows])
    kind = "conv" if shallow.role == "discriminator" else "deconv"
    for s in specs:
        if s.kind != kind:
            raise GrowthError(
                f"{shallow.role} growth blocks may only contain {kind} rows, got {NS.render_layer_spec(s)!r}"
            )
    insert = _insert_index(shallow)
    c_in = _channels_at(shallow, insert)
    dtype = shallow.parameters()[0].data.dtype
    factor = 1
    for s in specs:
        factor *= s.stride
    c_block = NS.scaled_channels(specs[-1].channels, shallow.scale)
    c_out = max(c_in, c_block)
    if shallow.role == "generator" and factor != 1:
        raise GrowthError("generator growth blocks must preserve the spatial extent")
    if plan.shortcut == "identity" and (factor != 1 or c_out != c_in):
        raise GrowthError(
            "identity shortcut requires a shape-preserving block; "
            f"this one maps {c_in} -> {c_block} channels with spatial factor {factor}"
        )
    if shallow.role == "discriminator" and factor > 1:
        h = shallow.input_shape[1]
        for layer in shallow.layers[:insert]:
            if isinstance(layer, L.Conv2d):
                h = (h + 2 * layer.pad - layer.kernel) // layer.stride + 1
            elif isinstance(layer, L.GrownBlock):
                h //= layer.pool_factor
        if h % factor:
            raise GrowthError(
                f"block downsamples by {factor} but the {h}x{h} map is not divisible"
            )

    deep = copy.deepcopy(shallow)
    act = "leaky_relu" if shallow.role == "discriminator" else "relu"
    block_id = len(shallow.grown_blocks()) + 1
    block_layers = []
    c = c_in
    for i, s in enumerate(specs):
        out_c = NS.scaled_channels(s.channels, shallow.scale)
        name = f"grow{block_id}/{kind}{i}"
        conv_cls = L.Conv2d if kind == "conv" else L.Deconv2d
        layer = conv_cls(name, c, out_c, s.kernel, s.stride, rng=None, dtype=dtype)
        layer.weight.data = _gaussian(rng, layer.weight.data.shape, plan.noise_std, dtype)
        bn = L.BatchNorm(f"{name}/bn", out_c, dtype)
        bn.seed_identity_stats(dtype)
        block_layers.extend([layer, bn, L.Activation(f"{name}/act", act)])
        c = out_c
    clock = GrowthClock(iters_per_epoch=iters_per_epoch)
    block = L.GrownBlock(
        f"grow{block_id}",
        block_layers,
        clock,
        plan.shortcut,
        in_channels=c_in,
        out_channels=c_out,
        pool_factor=factor,
    )
    deep.layers.insert(insert, block)

    if c_out > c_in:
        _widen_tail(deep, c_in, c_out, plan.noise_std, rng, dtype)
    deep.stage = plan.target_stage
    deep.applied_plans = list(getattr(shallow, "applied_plans", [])) + [plan]
    return deep


def _widen_tail(model, c_in, c_out, noise_std, rng, dtype):
    """Extend the first channel-consuming tail layer to c_out input channels.

    Copied weights keep the shallow function; the new slots multiply exact
    zeros at w = 0, so their Gaussian initialization cannot perturb it.
    """
    if model.role == "discriminator":
        fc = next(l for l in model.layers if isinstance(l, L.Dense))
        extra = _gaussian(rng, (c_out - c_in, fc.out_features), noise_std, dtype)
        fc.weight.data = np.concatenate([fc.weight.data, extra], axis=0)
        fc.in_features = c_out
    else:
        out_layer = model.layers[_insert_index(model)]
        extra = _gaussian(
            rng, (c_out - c_in,) + out_layer.weight.data.shape[1:], noise_std, dtype
        )
        out_layer.weight.data = np.concatenate([out_layer.weight.data, extra], axis=0)
        out_layer.in_channels = c_out


def calibrate_norm_stats(model, batch, rng=None):
    """One calibration pass: uncalibrated batch-norm layers absorb this
    batch's statistics; everything else runs in eval behaviour untouched."""
    if not isinstance(batch, Tensor):
        batch = Tensor(np.asarray(batch))
    if batch.data.shape[0] < 1:
        raise ValueError("calibration batch is empty")
    model.forward(batch, L.Context(L.CALIBRATE, rng))
    return model


def new_block_param_count(model, plan):
    """Parameter count the plan adds, from the row arithmetic alone."""
    specs = NS.expand_rows([NS.parse_layer_spec(r) for r in plan.rows])
    c_in = _channels_at(model, _insert_index(model))
    total = 0
    c = c_in
    for s in specs:
        out_c = NS.scaled_channels(s.channels, model.scale)
        total += s.kernel * s.kernel * c * out_c + 2 * out_c
        c = out_c
    c_out = max(c_in, c)
    if c_out > c_in:
        if model.role == "discriminator":
            fc = next(l for l in model.layers if isinstance(l, L.Dense))
            total += (c_out - c_in) * fc.out_features
        else:
            out_layer = model.layers[_insert_index(model)]
            k = out_layer.kernel
            total += (c_out - c_in) * out_layer.out_channels * k * k
    return total
