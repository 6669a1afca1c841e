"""Layer-notation parsing and network construction.

Rows follow the "(convolution type)(kernel size)-(channels)S(stride)" notation
with an optional "xN" repetition suffix, plus the fixed rows used by the
generator and discriminator chains (Input/Output extents, latent sampling,
projection FC, reshape, dropout, pooling, heads). A ``NetworkSpec`` is an
ordered list of such rows plus a class count and a channel-width multiplier;
``build_model`` turns one into a parameterized, Xavier-initialized model.

Two families of blueprints are provided: the reference tables at full width
and resolution (usable for shape checks), and desk-scale variants at 16x16
with narrowed channels where every growth stage shares one resolution and
growth blocks are stride-1.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

import numpy as np

from . import layers as L
from .tensor import Tensor

DESK_IMAGE = 16
DESK_SCALE = 0.125
STAGES = ("baby", "junior", "senior")


class SpecParseError(ValueError):
    """Malformed layer-notation string; carries the failing position."""

    def __init__(self, text, position, message):
        self.text = text
        self.position = position
        super().__init__(f"{message} at position {position} in {text!r}")


class BuildError(ValueError):
    """A layer chain is not shape-consistent; names the offending layer."""


@dataclass
class LayerSpec:
    kind: str
    kernel: int = 0
    channels: int = 0
    stride: int = 1
    rate: float = 0.0
    repeat: int = 1
    explicit_repeat: bool = False
    extents: tuple = ()
    dist: str = ""
    units: tuple = ()


@dataclass
class LatentPrior:
    dim: int = 100
    kind: str = "uniform"

    def __post_init__(self):
        if self.dim <= 0:
            raise ValueError("latent dimension must be positive")
        if self.kind not in ("uniform", "gaussian"):
            raise ValueError(f"unknown latent prior {self.kind!r}")


@dataclass
class NetworkSpec:
    stage: str
    role: str
    rows: list
    num_classes: int
    scale: float = 1.0

    def layer_specs(self):
        return [parse_layer_spec(r) for r in self.rows]

    def to_text(self):
        lines = [
            f"network {self.role} {self.stage}",
            f"classes {self.num_classes}",
            f"scale {self.scale!r}",
        ]
        lines.extend(self.rows)
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        lines = [ln for ln in text.splitlines() if ln.strip()]
        head = lines[0].split()
        if len(head) != 3 or head[0] != "network":
            raise SpecParseError(lines[0], 0, "expected 'network <role> <stage>' header")
        role, stage = head[1], head[2]
        num_classes = int(lines[1].split()[1])
        scale = float(lines[2].split()[1])
        rows = lines[3:]
        for r in rows:
            parse_layer_spec(r)
        return cls(stage=stage, role=role, rows=rows, num_classes=num_classes, scale=scale)


# -- parsing -----------------------------------------------------------------


def _expect_int(text, pos, what):
    m = re.match(r"\d+", text[pos:])
    if not m:
        raise SpecParseError(text, pos, f"expected {what}")
    return int(m.group()), pos + m.end()


def _expect(text, pos, literal):
    if not text.startswith(literal, pos):
        raise SpecParseError(text, pos, f"expected {literal!r}")
    return pos + len(literal)


def _expect_end(text, pos):
    if pos != len(text):
        raise SpecParseError(text, pos, "unexpected trailing text")


def _parse_triplet(text, pos, sep):
    a, pos = _expect_int(text, pos, "an extent")
    pos = _expect(text, pos, sep)
    b, pos = _expect_int(text, pos, "an extent")
    pos = _expect(text, pos, sep)
    c, pos = _expect_int(text, pos, "an extent")
    return (a, b, c), pos


_SAMPLE_RE = re.compile(r"Sample (\d+) number from (Uniform|Gaussian) Distribution$")


def parse_layer_spec(text: str) -> LayerSpec:
    """Parse one notation row; raises SpecParseError with a position."""
    if text == "Global Average Pooling":
        return LayerSpec(kind="gap")
    if text == "softmax":
        return LayerSpec(kind="softmax_head")
    if text == "FC":
        return LayerSpec(kind="fc")
    if text == "Tanh Activation":
        return LayerSpec(kind="tanh")
    if text.startswith("Dropout"):
        pos = _expect(text, len("Dropout"), "(")
        m = re.match(r"\d*\.\d+|\d+", text[pos:])
        if not m:
            raise SpecParseError(text, pos, "expected a dropout rate")
        rate = float(m.group())
        pos = _expect(text, pos + m.end(), ")")
        _expect_end(text, pos)
        if not 0.0 < rate < 1.0:
            raise SpecParseError(text, len("Dropout("), "dropout rate must be in (0, 1)")
        return LayerSpec(kind="dropout", rate=rate)
    if text.startswith("Input") or text.startswith("Output"):
        kind = "input" if text.startswith("Input") else "output"
        pos = _expect(text, len(kind.capitalize()) if kind == "input" else len("Output"), "(")
        extents, pos = _parse_triplet(text, pos, "x")
        pos = _expect(text, pos, ")")
        _expect_end(text, pos)
        return LayerSpec(kind=kind, extents=extents)
    if text.startswith("Sample"):
        m = _SAMPLE_RE.match(text)
        if not m:
            raise SpecParseError(text, len("Sample"), "expected '<dim> number from <Uniform|Gaussian> Distribution'")
        return LayerSpec(kind="input", channels=int(m.group(1)), dist=m.group(2).lower())
    if text.startswith("FC-"):
        units, pos = _parse_triplet(text, len("FC-"), "*")
        _expect_end(text, pos)
        return LayerSpec(kind="fc", units=units)
    if text.startswith("Reshape-("):
        target, pos = _parse_triplet(text, len("Reshape-("), ",")
        pos = _expect(text, pos, ")")
        _expect_end(text, pos)
        return LayerSpec(kind="reshape", units=target)
    if text.startswith("Conv") or text.startswith("Deconv"):
        kind = "deconv" if text.startswith("Deconv") else "conv"
        pos = len("Deconv") if kind == "deconv" else len("Conv")
        kernel, pos = _expect_int(text, pos, "a kernel size")
        pos = _expect(text, pos, "-")
        channels, pos = _expect_int(text, pos, "a channel count")
        pos = _expect(text, pos, "S")
        stride, pos = _expect_int(text, pos, "a stride")
        repeat = 1
        explicit = False
        if pos < len(text):
            # Accept both the ASCII marker and the typeset multiplication sign.
            if text[pos] in ("x", "×"):
                repeat, pos = _expect_int(text, pos + 1, "a repeat count")
                explicit = True
            else:
                raise SpecParseError(text, pos, "unexpected trailing text")
        _expect_end(text, pos)
        if kernel <= 0 or channels <= 0 or stride <= 0 or repeat <= 0:
            raise SpecParseError(text, 0, "kernel, channels, stride and repeat must be positive")
        return LayerSpec(
            kind=kind,
            kernel=kernel,
            channels=channels,
            stride=stride,
            repeat=repeat,
            explicit_repeat=explicit,
        )
    raise SpecParseError(text, 0, "unrecognized layer notation")


def render_layer_spec(spec: LayerSpec) -> str:
    """Inverse of parse_layer_spec for canonical rows."""
    if spec.kind == "gap":
        return "Global Average Pooling"
    if spec.kind == "softmax_head":
        return "softmax"
    if spec.kind == "tanh":
        return "Tanh Activation"
    if spec.kind == "dropout":
        return f"Dropout({spec.rate})"
    if spec.kind == "input" and spec.dist:
        return f"Sample {spec.channels} number from {spec.dist.capitalize()} Distribution"
    if spec.kind in ("input", "output"):
        name = "Input" if spec.kind == "input" else "Output"
        return f"{name}({spec.extents[0]}x{spec.extents[1]}x{spec.extents[2]})"
    if spec.kind == "fc":
        if spec.units:
            return f"FC-{spec.units[0]}*{spec.units[1]}*{spec.units[2]}"
        return "FC"
    if spec.kind == "reshape":
        return f"Reshape-({spec.units[0]},{spec.units[1]},{spec.units[2]})"
    if spec.kind in ("conv", "deconv"):
        base = "Conv" if spec.kind == "conv" else "Deconv"
        text = f"{base}{spec.kernel}-{spec.channels}S{spec.stride}"
        if spec.repeat != 1 or spec.explicit_repeat:
            text += f"x{spec.repeat}"
        return text
    raise ValueError(f"cannot render layer kind {spec.kind!r}")


def expand_rows(specs):
    """Unfold repetition markers into one LayerSpec per physical layer."""
    out = []
    for s in specs:
        for _ in range(s.repeat):
            out.append(replace(s, repeat=1, explicit_repeat=False))
    return out


# -- table blueprints ---------------------------------------------------------

# The reference architecture tables, one row string per cell. These are the
# strings the parser must round-trip; builders below may adjust strides where
# the printed chains are not shape-consistent with their own output rows.
DISCRIMINATOR_TABLE = {
    "baby": [
        "Input(32x32x3)",
        "Conv3-64S1",
        "Conv3-64S1",
        "Conv3-64S2",
        "Conv3-128S2x2",
        "Conv3-128S1x2",
        "Conv3-128S1x1",
        "Dropout(0.5)",
        "Global Average Pooling",
        "FC",
        "softmax",
    ],
    "junior": [
        "Input(128x128x3)",
        "Conv3-64S1",
        "Conv3-64S1",
        "Conv3-64S2",
        "Conv3-128S2x2",
        "Conv3-128S1x2",
        "Conv3-128S1x1",
        "Conv3-192S1x2",
        "Conv3-192S1x2",
        "Conv3-192S2x1",
        "Dropout(0.5)",
        "Global Average Pooling",
        "FC",
        "softmax",
    ],
    "senior": [
        "Input(512x512x3)",
        "Conv3-64S1",
        "Conv3-64S1",
        "Conv3-64S2",
        "Conv3-128S2x2",
        "Conv3-128S1x2",
        "Conv3-128S1x1",
        "Conv3-192S1x2",
        "Conv3-192S1x2",
        "Conv3-192S2x1",
        "Conv3-256S1x2",
        "Conv3-256S1x2",
        "Conv3-256S2x2",
        "Dropout(0.5)",
        "Global Average Pooling",
        "FC",
        "softmax",
    ],
}

GENERATOR_TABLE = {
    "baby": [
        "Sample 100 number from Uniform Distribution",
        "FC-512*4*4",
        "Reshape-(4,4,512)",
        "Deconv5-256S2",
        "Deconv5-128S2",
        "Deconv5-128S2",
        "Output(32x32x3)",
        "Tanh Activation",
    ],
    "junior": [
        "Sample 100 number from Uniform Distribution",
        "FC-512*4*4",
        "Reshape-(4,4,512)",
        "Deconv5-256S2",
        "Deconv5-128S2",
        "Deconv5-128S2",
        "Deconv5-128S1",
        "Deconv5-128S2",
        "Deconv5-128S2",
        "Deconv5-128S1",
        "Deconv5-64S2",
        "Deconv5-64S2",
        "Deconv5-32S1",
        "Output(128x128x3)",
        "Tanh Activation",
    ],
    "senior": [
        "Sample 100 number from Uniform Distribution",
        "FC-512*4*4",
        "Reshape-(4,4,512)",
        "Deconv5-256S2",
        "Deconv5-128S2",
        "Deconv5-128S2",
        "Deconv5-128S1",
        "Deconv5-128S2",
        "Deconv5-128S2",
        "Deconv5-128S1",
        "Deconv5-64S2",
        "Deconv5-64S2",
        "Deconv5-32S1",
        "Deconv5-32S2",
        "Deconv5-32S2",
        "Output(512x512x3)",
        "Tanh Activation",
    ],
}

# Buildable reference rows. The discriminator trunk carries nine convolutions
# (the last stride-1 row is doubled relative to the printed table, whose rows
# only sum to eight); the junior generator demotes its two 64-channel rows to
# stride 1 so the chain lands exactly on its declared output extent.
_D_TRUNK = [
    "Conv3-64S1",
    "Conv3-64S1",
    "Conv3-64S2",
    "Conv3-128S2x2",
    "Conv3-128S1x2",
    "Conv3-128S1x2",
]
_D_JUNIOR_BLOCK = ["Conv3-192S1x2", "Conv3-192S1x2", "Conv3-192S2x1"]
_D_SENIOR_BLOCK = ["Conv3-256S1x2", "Conv3-256S1x2", "Conv3-256S2x2"]
_D_TAIL = ["Dropout(0.5)", "Global Average Pooling", "FC", "softmax"]

_G_HEAD = ["FC-512*4*4", "Reshape-(4,4,512)"]
_G_TRUNK = ["Deconv5-256S2", "Deconv5-128S2", "Deconv5-128S2"]
_G_JUNIOR_BLOCK = [
    "Deconv5-128S1",
    "Deconv5-128S2",
    "Deconv5-128S2",
    "Deconv5-128S1",
    "Deconv5-64S1",
    "Deconv5-64S1",
    "Deconv5-32S1",
]
_G_SENIOR_BLOCK = ["Deconv5-32S2", "Deconv5-32S2"]

# Desk-scale variants: one shared resolution, growth blocks are stride 1, and
# the generator trunk upsamples 4 -> 16 with its last deconv at stride 1.
_DESK_G_TRUNK = ["Deconv5-256S2", "Deconv5-128S2", "Deconv5-128S1"]
_DESK_G_JUNIOR_BLOCK = [
    "Deconv5-128S1",
    "Deconv5-128S1",
    "Deconv5-128S1",
    "Deconv5-128S1",
    "Deconv5-64S1",
    "Deconv5-64S1",
    "Deconv5-32S1",
]
_DESK_G_SENIOR_BLOCK = ["Deconv5-32S1", "Deconv5-32S1"]
_DESK_D_JUNIOR_BLOCK = ["Conv3-192S1x2", "Conv3-192S1x2", "Conv3-192S1x1"]
_DESK_D_SENIOR_BLOCK = ["Conv3-256S1x2", "Conv3-256S1x2", "Conv3-256S1x2"]

_REF_IMAGE = {"baby": 32, "junior": 128, "senior": 512}


def _sample_row(prior: LatentPrior) -> str:
    return f"Sample {prior.dim} number from {prior.kind.capitalize()} Distribution"


def block_rows(role, source_stage, target_stage, desk=True):
    """Rows a growth step adds when moving source -> target (may skip a stage)."""
    si, ti = STAGES.index(source_stage), STAGES.index(target_stage)
    if ti <= si:
        raise ValueError(f"growth must move forward, got {source_stage} -> {target_stage}")
    if role == "discriminator":
        pieces = [_DESK_D_JUNIOR_BLOCK, _DESK_D_SENIOR_BLOCK] if desk else [_D_JUNIOR_BLOCK, _D_SENIOR_BLOCK]
    else:
        pieces = [_DESK_G_JUNIOR_BLOCK, _DESK_G_SENIOR_BLOCK] if desk else [_G_JUNIOR_BLOCK, _G_SENIOR_BLOCK]
    rows = []
    for idx in range(si, ti):
        rows.extend(pieces[idx])
    return rows


def discriminator_spec(stage, num_classes, desk=True, scale=DESK_SCALE, image=DESK_IMAGE):
    """Buildable discriminator blueprint for one stage."""
    if desk:
        size, blocks = image, [_DESK_D_JUNIOR_BLOCK, _DESK_D_SENIOR_BLOCK]
    else:
        size, blocks, scale = _REF_IMAGE[stage], [_D_JUNIOR_BLOCK, _D_SENIOR_BLOCK], scale
    rows = [f"Input({size}x{size}x3)"] + list(_D_TRUNK)
    for idx in range(STAGES.index(stage)):
        rows.extend(blocks[idx])
    rows.extend(_D_TAIL)
    return NetworkSpec(stage=stage, role="discriminator", rows=rows, num_classes=num_classes, scale=scale)


def generator_spec(stage, num_classes, desk=True, scale=DESK_SCALE, image=DESK_IMAGE, prior=None):
    """Buildable generator blueprint for one stage."""
    prior = prior or LatentPrior()
    if desk:
        size, trunk, blocks = image, _DESK_G_TRUNK, [_DESK_G_JUNIOR_BLOCK, _DESK_G_SENIOR_BLOCK]
    else:
        size, trunk, blocks = _REF_IMAGE[stage], _G_TRUNK, [_G_JUNIOR_BLOCK, _G_SENIOR_BLOCK]
    rows = [_sample_row(prior)] + list(_G_HEAD) + list(trunk)
    for idx in range(STAGES.index(stage)):
        rows.extend(blocks[idx])
    rows.extend([f"Output({size}x{size}x3)", "Tanh Activation"])
    return NetworkSpec(stage=stage, role="generator", rows=rows, num_classes=num_classes, scale=scale)


def scaled_channels(channels, scale):
    return max(1, round(channels * scale))


# -- builders ------------------------------------------------------------------


def build_model(spec: NetworkSpec, rng_seed=0, dtype=np.float64, init=True):
    """Construct a parameterized model from a blueprint.

    Weights are Xavier-initialized from ``rng_seed`` unless ``init`` is False
    (used when a checkpoint will overwrite them anyway).
    """
    rng = np.random.default_rng(rng_seed) if init else None
    if spec.role == "discriminator":
        model = _build_discriminator(spec, rng, dtype)
    elif spec.role == "generator":
        model = _build_generator(spec, rng, dtype)
    else:
        raise BuildError(f"unknown role {spec.role!r}")
    model.build_spec = spec
    return model


def conv_block(name, in_channels, out_channels, kernel, stride, act, rng, dtype, deconv=False):
    """Convolution + batch norm + activation, the repeated unit of both nets."""
    conv_cls = L.Deconv2d if deconv else L.Conv2d
    return [
        conv_cls(name, in_channels, out_channels, kernel, stride, rng, dtype),
        L.BatchNorm(f"{name}/bn", out_channels, dtype),
        L.Activation(f"{name}/act", act),
    ]


def _build_discriminator(spec, rng, dtype):
    rows = expand_rows(spec.layer_specs())
    if rows[0].kind != "input" or rows[0].dist:
        raise BuildError(f"discriminator must start with an Input row, got {spec.rows[0]!r}")
    h, w, c = rows[0].extents
    chain = []
    idx = 0
    saw_gap = saw_fc = False
    for row in rows[1:]:
        label = render_layer_spec(row)
        if row.kind == "conv":
            out_c = scaled_channels(row.channels, spec.scale)
            chain.extend(conv_block(f"conv{idx}", c, out_c, row.kernel, row.stride, "leaky_relu", rng, dtype))
            h = (h + 2 * (row.kernel // 2) - row.kernel) // row.stride + 1
            w = (w + 2 * (row.kernel // 2) - row.kernel) // row.stride + 1
            c = out_c
            idx += 1
            if h < 1 or w < 1:
                raise BuildError(f"layer {label!r} shrinks the map to {h}x{w}")
        elif row.kind == "dropout":
            chain.append(L.Dropout(f"dropout{idx}", row.rate))
            idx += 1
        elif row.kind == "gap":
            chain.append(L.GlobalAvgPool(f"gap{idx}"))
            idx += 1
            saw_gap = True
        elif row.kind == "fc":
            if not saw_gap:
                raise BuildError(f"layer {label!r} appears before Global Average Pooling")
            chain.append(L.Dense(f"fc{idx}", c, spec.num_classes + 1, rng, dtype))
            idx += 1
            saw_fc = True
        elif row.kind == "softmax_head":
            if not saw_fc:
                raise BuildError(f"layer {label!r} appears before the FC head")
        else:
            raise BuildError(f"layer {label!r} is not valid in a discriminator chain")
    return L.Model(
        chain,
        role="discriminator",
        stage=spec.stage,
        num_classes=spec.num_classes,
        input_shape=(rows[0].extents[2], rows[0].extents[0], rows[0].extents[1]),
        spec_rows=spec.rows,
        scale=spec.scale,
    )


def _build_generator(spec, rng, dtype):
    rows = expand_rows(spec.layer_specs())
    if rows[0].kind != "input" or not rows[0].dist:
        raise BuildError(f"generator must start with a Sample row, got {spec.rows[0]!r}")
    latent_dim = rows[0].channels
    out_row = next((r for r in rows if r.kind == "output"), None)
    if out_row is None:
        raise BuildError("generator chain has no Output row")
    img_h, img_w, img_c = out_row.extents
    chain = []
    idx = 0
    c = h = w = None
    for row in rows[1:]:
        label = render_layer_spec(row)
        if row.kind == "fc":
            if not row.units:
                raise BuildError("generator FC rows must carry projection units")
            base_c = scaled_channels(row.units[0], spec.scale)
            chain.append(L.Dense(f"fc{idx}", latent_dim, base_c * row.units[1] * row.units[2], rng, dtype))
            idx += 1
            c, h, w = base_c, row.units[1], row.units[2]
        elif row.kind == "reshape":
            target_c = scaled_channels(row.units[2], spec.scale)
            if (target_c, row.units[0], row.units[1]) != (c, h, w):
                raise BuildError(f"layer {label!r} does not match the projection size {c}x{h}x{w}")
            chain.append(L.Reshape(f"reshape{idx}", (c, h, w)))
            chain.append(L.BatchNorm(f"reshape{idx}/bn", c, dtype))
            chain.append(L.Activation(f"reshape{idx}/act", "relu"))
            idx += 1
        elif row.kind == "deconv":
            if c is None:
                raise BuildError(f"layer {label!r} appears before the projection FC")
            out_c = scaled_channels(row.channels, spec.scale)
            chain.extend(conv_block(f"deconv{idx}", c, out_c, row.kernel, row.stride, "relu", rng, dtype, deconv=True))
            h, w, c = h * row.stride, w * row.stride, out_c
            idx += 1
        elif row.kind == "output":
            if (h, w) != (img_h, img_w):
                raise BuildError(
                    f"layer {label!r} expects a {img_h}x{img_w} map but the chain produced {h}x{w}"
                )
            chain.append(L.Deconv2d(f"out{idx}", c, img_c, 5, 1, rng, dtype, bias=True))
            idx += 1
            c = img_c
        elif row.kind == "tanh":
            chain.append(L.Activation(f"tanh{idx}", "tanh"))
            idx += 1
        else:
            raise BuildError(f"layer {label!r} is not valid in a generator chain")
    model = L.Model(
        chain,
        role="generator",
        stage=spec.stage,
        num_classes=spec.num_classes,
        input_shape=(latent_dim,),
        spec_rows=spec.rows,
        scale=spec.scale,
    )
    model.latent_prior = LatentPrior(dim=latent_dim, kind=rows[0].dist)
    model.image_shape = (img_c, img_h, img_w)
    return model


def sample_latent(prior: LatentPrior, m: int, rng, dtype=np.float64) -> Tensor:
    """Draw a batch of i.i.d. latent vectors; reproducible under a fixed rng."""
    if m < 1:
        raise ValueError("batch size must be at least 1")
    if prior.kind == "uniform":
        data = rng.uniform(-1.0, 1.0, size=(m, prior.dim))
    else:
        data = rng.standard_normal(size=(m, prior.dim))
    return Tensor(data.astype(dtype))
