"""Datasets, pixel normalization, binary file formats and image dumps.

Two little-endian container formats with fixed field order and no padding:

SGDS v1 (dataset)::

    magic "SGDS" | version u32 | n u32 | h u16 | w u16 | c u16 | k u16
    pixels: n*h*w*c bytes (row-major, NHWC)
    labels: n int16 (-1 marks an unlabeled sample)

SGCK v1 (checkpoint)::

    magic "SGCK" | version u32
    meta JSON (u32 length + utf8)
    discriminator bundle text (u32 length + utf8)
    generator bundle text (u32 length + utf8)
    tensor table: count u32, then per tensor
        name (u16 length + utf8) | dtype u8 (0=f64, 1=f32) | ndim u8 |
        dims u32 each | payload

A model bundle is the network blueprint text followed by the growth plans
applied to it, in order; loading replays the plans over a zero-initialized
build and then overwrites every array from the tensor table, so parameters
round-trip bitwise.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import growth as GR
from . import netspec as NS

SGDS_MAGIC = b"SGDS"
SGCK_MAGIC = b"SGCK"
SGDS_VERSION = 1
SGCK_VERSION = 1

_DTYPE_CODES = {0: np.float64, 1: np.float32}
_DTYPE_TO_CODE = {np.dtype(np.float64): 0, np.dtype(np.float32): 1}


class FormatError(ValueError):
    """Base class for container-format failures."""


class BadMagicError(FormatError):
    pass


class BadVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise TruncatedFileError(f"file ended while reading {what} ({len(buf)}/{n} bytes)")
    return buf


# -- synthetic data -------------------------------------------------------------


@dataclass
class SyntheticSpec:
    classes: int = 4
    size: int = 16
    channels: int = 3
    per_class: int = 100
    noise_std: float = 20.0

    def __post_init__(self):
        if self.classes < 2:
            raise ValueError("need at least two classes")
        if self.classes > 6:
            raise ValueError("only six procedural patterns are defined")


@dataclass
class Dataset:
    pixels: np.ndarray  # (n, h, w, c) uint8
    labels: np.ndarray  # (n,) int16, -1 = unlabeled
    num_classes: int

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8)
        self.labels = np.asarray(self.labels, dtype=np.int16)
        if self.pixels.ndim != 4:
            raise ValueError(f"pixels must be NHWC, got shape {self.pixels.shape}")
        if len(self.labels) != len(self.pixels):
            raise ValueError("labels and pixels disagree on sample count")
        bad = (self.labels < -1) | (self.labels >= self.num_classes)
        if bad.any():
            raise ValueError("labels must lie in {-1, 0..k-1}")

    def __len__(self):
        return len(self.pixels)

    @property
    def image_shape(self):
        return self.pixels.shape[1:]


_BG, _FG = 40.0, 215.0


def _pattern(cls, size):
    y, x = np.mgrid[0:size, 0:size]
    period = max(2, size // 4)
    if cls == 0:  # horizontal stripes
        mask = (y // period) % 2 == 0
    elif cls == 1:  # vertical stripes
        mask = (x // period) % 2 == 0
    elif cls == 2:  # checkerboard
        mask = ((y // period) + (x // period)) % 2 == 0
    elif cls == 3:  # centered disk
        c = (size - 1) / 2.0
        mask = (y - c) ** 2 + (x - c) ** 2 <= (0.32 * size) ** 2
    elif cls == 4:  # diagonal stripes
        mask = ((x + y) // period) % 2 == 0
    else:  # ring
        c = (size - 1) / 2.0
        r2 = (y - c) ** 2 + (x - c) ** 2
        mask = ((0.2 * size) ** 2 <= r2) & (r2 <= (0.45 * size) ** 2)
    return np.where(mask, _FG, _BG)


def generate_synthetic(spec: SyntheticSpec, seed=0) -> Dataset:
    """Procedural class patterns plus Gaussian pixel noise, clamped to [0, 255]."""
    rng = np.random.default_rng(seed)
    n = spec.classes * spec.per_class
    pixels = np.empty((n, spec.size, spec.size, spec.channels), dtype=np.uint8)
    labels = np.empty(n, dtype=np.int16)
    row = 0
    for cls in range(spec.classes):
        base = _pattern(cls, spec.size)[:, :, None].repeat(spec.channels, axis=2)
        for _ in range(spec.per_class):
            img = base
            if spec.noise_std > 0:
                img = img + rng.normal(0.0, spec.noise_std, size=base.shape)
            pixels[row] = np.clip(np.rint(img), 0, 255).astype(np.uint8)
            labels[row] = cls
            row += 1
    return Dataset(pixels=pixels, labels=labels, num_classes=spec.classes)


# -- pixel normalization ---------------------------------------------------------


def normalize_pixels(pixels: np.ndarray, dtype=np.float64) -> np.ndarray:
    """uint8 NHWC (or HWC) -> float NCHW in [-1, 1] via x / 127.5 - 1."""
    arr = np.asarray(pixels)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    out = (arr.astype(dtype) / 127.5 - 1.0).transpose(0, 3, 1, 2)
    return out[0] if single else out


def denormalize_pixels(images: np.ndarray) -> np.ndarray:
    """float NCHW (or CHW) in [-1, 1] -> uint8 NHWC, clamped."""
    arr = np.asarray(images)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    out = np.clip(np.rint((arr + 1.0) * 127.5), 0, 255).astype(np.uint8).transpose(0, 2, 3, 1)
    return out[0] if single else out


# -- SGDS ------------------------------------------------------------------------


def save_dataset(ds: Dataset, path):
    n, h, w, c = ds.pixels.shape
    with open(path, "wb") as f:
        f.write(SGDS_MAGIC)
        f.write(struct.pack("<I", SGDS_VERSION))
        f.write(struct.pack("<IHHHH", n, h, w, c, ds.num_classes))
        f.write(np.ascontiguousarray(ds.pixels).tobytes())
        f.write(ds.labels.astype("<i2").tobytes())


def load_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != SGDS_MAGIC:
            raise BadMagicError(f"expected {SGDS_MAGIC!r}, found {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != SGDS_VERSION:
            raise BadVersionError(f"unsupported SGDS version {version}")
        n, h, w, c, k = struct.unpack("<IHHHH", _read_exact(f, 12, "header"))
        pixels = np.frombuffer(_read_exact(f, n * h * w * c, "pixel block"), dtype=np.uint8)
        labels = np.frombuffer(_read_exact(f, 2 * n, "label block"), dtype="<i2")
    return Dataset(
        pixels=pixels.reshape(n, h, w, c).copy(),
        labels=labels.astype(np.int16),
        num_classes=k,
    )


# -- images ----------------------------------------------------------------------


def write_image(image, path):
    """Dump a CHW float image in [-1, 1] as binary PPM (3 channels) or PGM (1)."""
    arr = image.data if hasattr(image, "data") else np.asarray(image)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ValueError(f"expected a 1- or 3-channel CHW image, got shape {arr.shape}")
    pixels = denormalize_pixels(arr)
    h, w, c = pixels.shape
    header = (f"P6\n{w} {h}\n255\n" if c == 3 else f"P5\n{w} {h}\n255\n").encode()
    with open(path, "wb") as f:
        f.write(header)
        f.write(pixels.tobytes())


# -- SGCK ------------------------------------------------------------------------


def _model_bundle_text(model):
    spec = model.build_spec
    parts = [spec.to_text()]
    for plan in getattr(model, "applied_plans", []):
        parts.append("plan:\n" + plan.to_text())
    return "".join(parts)


def _model_from_bundle(text, dtype=np.float64):
    if "plan:" in text:
        spec_text, _, rest = text.partition("plan:")
        plan_texts = [p for p in rest.split("plan:") if p.strip()]
    else:
        spec_text, plan_texts = text, []
    spec = NS.NetworkSpec.from_text(spec_text)
    model = NS.build_model(spec, init=False, dtype=dtype)
    for plan_text in plan_texts:
        plan = GR.GrowthPlan.from_text(plan_text)
        model = GR.grow_network(model, plan, rng=None, iters_per_epoch=1)
    return model


def _write_blob(f, data: bytes):
    f.write(struct.pack("<I", len(data)))
    f.write(data)


def _read_blob(f, what):
    (n,) = struct.unpack("<I", _read_exact(f, 4, f"{what} length"))
    return _read_exact(f, n, what)


def _write_tensor_table(f, table, dtype=None):
    f.write(struct.pack("<I", len(table)))
    for name in sorted(table):
        arr = np.asarray(table[name])
        if dtype is not None:
            arr = arr.astype(dtype)
        code = _DTYPE_TO_CODE[arr.dtype]
        encoded = name.encode()
        f.write(struct.pack("<H", len(encoded)))
        f.write(encoded)
        f.write(struct.pack("<BB", code, arr.ndim))
        for d in arr.shape:
            f.write(struct.pack("<I", d))
        f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def _read_tensor_table(f):
    (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
    table = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(f, 2, "tensor name length"))
        name = _read_exact(f, name_len, "tensor name").decode()
        code, ndim = struct.unpack("<BB", _read_exact(f, 2, "tensor header"))
        if code not in _DTYPE_CODES:
            raise FormatError(f"unknown dtype code {code} for tensor {name!r}")
        dims = struct.unpack(
            "<" + "I" * ndim, _read_exact(f, 4 * ndim, f"dims of {name!r}")
        )
        dt = np.dtype(_DTYPE_CODES[code]).newbyteorder("<")
        payload = _read_exact(f, int(np.prod(dims)) * dt.itemsize, f"payload of {name!r}")
        table[name] = np.frombuffer(payload, dtype=dt).reshape(dims).astype(_DTYPE_CODES[code])
    return table


@dataclass
class Checkpoint:
    d_model: object
    g_model: object
    opt_state: dict
    meta: dict


def _clock_meta(model):
    return [
        {"iters_done": b.clock.iters_done_in_stage, "iters_per_epoch": b.clock.iters_per_epoch}
        for b in model.grown_blocks()
    ]


def _bn_flags(model):
    return {bn.name: bn.calibrated for bn in model.batch_norms()}


def save_checkpoint(path, d_model, g_model, opt_state=None, meta=None, dtype="f64"):
    """Write a full training checkpoint; f64 payloads round-trip bitwise."""
    store_dtype = {"f64": np.float64, "f32": np.float32}[dtype]
    meta = dict(meta or {})
    meta["models"] = {
        "d": {"clocks": _clock_meta(d_model), "bn_calibrated": _bn_flags(d_model)},
        "g": {"clocks": _clock_meta(g_model), "bn_calibrated": _bn_flags(g_model)},
    }
    opt_state = opt_state or {}
    meta["opt_steps"] = {k: v.get("step", 0) for k, v in opt_state.items()}

    table = {}
    for prefix, model in (("d", d_model), ("g", g_model)):
        for name, arr in model.named_arrays().items():
            table[f"{prefix}/{name}"] = arr
    for prefix, state in opt_state.items():
        for name, arr in state.get("m", {}).items():
            table[f"opt/{prefix}/{name}/m"] = arr
        for name, arr in state.get("v", {}).items():
            table[f"opt/{prefix}/{name}/v"] = arr

    with open(path, "wb") as f:
        f.write(SGCK_MAGIC)
        f.write(struct.pack("<I", SGCK_VERSION))
        _write_blob(f, json.dumps(meta).encode())
        _write_blob(f, _model_bundle_text(d_model).encode())
        _write_blob(f, _model_bundle_text(g_model).encode())
        _write_tensor_table(f, table, dtype=store_dtype)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != SGCK_MAGIC:
            raise BadMagicError(f"expected {SGCK_MAGIC!r}, found {magic!r}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != SGCK_VERSION:
            raise BadVersionError(f"unsupported SGCK version {version}")
        meta = json.loads(_read_blob(f, "meta").decode())
        d_text = _read_blob(f, "discriminator bundle").decode()
        g_text = _read_blob(f, "generator bundle").decode()
        table = _read_tensor_table(f)

    dtype = np.float32 if meta.get("config", {}).get("dtype") == "f32" else np.float64
    models = {}
    for prefix, text in (("d", d_text), ("g", g_text)):
        model = _model_from_bundle(text, dtype=dtype)
        sub = {
            name[len(prefix) + 1 :]: arr
            for name, arr in table.items()
            if name.startswith(prefix + "/") and not name.startswith("opt/")
        }
        model.load_arrays(sub, dtype=dtype)
        model_meta = meta.get("models", {}).get(prefix, {})
        flags = model_meta.get("bn_calibrated", {})
        for bn in model.batch_norms():
            bn.calibrated = flags.get(bn.name, bn.running_mean is not None)
        for block, cmeta in zip(model.grown_blocks(), model_meta.get("clocks", [])):
            block.clock.iters_per_epoch = cmeta["iters_per_epoch"]
            block.clock.iters_done_in_stage = cmeta["iters_done"]
        models[prefix] = model

    opt_state = {}
    for prefix in ("d", "g"):
        m = {
            name[len(f"opt/{prefix}/") : -2]: arr
            for name, arr in table.items()
            if name.startswith(f"opt/{prefix}/") and name.endswith("/m")
        }
        v = {
            name[len(f"opt/{prefix}/") : -2]: arr
            for name, arr in table.items()
            if name.startswith(f"opt/{prefix}/") and name.endswith("/v")
        }
        if m or v:
            opt_state[prefix] = {
                "step": meta.get("opt_steps", {}).get(prefix, 0),
                "m": m,
                "v": v,
            }
    return Checkpoint(models["d"], models["g"], opt_state, meta)
