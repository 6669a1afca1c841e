"""Kernel maximum mean discrepancy over feature batches.

The squared-MMD estimator is the biased V-statistic over the three Gram
blocks, diagonals included, so for the inner-product kernel it equals the
squared distance between the two batch means. Everything is differentiable
with respect to both feature batches.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ShapeError, Tensor, matmul, texp, tsum


@dataclass(frozen=True)
class Kernel:
    kind: str = "inner_product"
    bandwidth: float = 1.0

    def __post_init__(self):
        if self.kind not in ("inner_product", "gaussian"):
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "gaussian" and self.bandwidth <= 0:
            raise ValueError("gaussian bandwidth must be positive")


def _as_matrix(batch):
    t = batch if isinstance(batch, Tensor) else Tensor(batch)
    if t.data.ndim != 2:
        raise ShapeError(f"feature batches must be 2-D, got {t.data.shape}")
    if t.data.shape[0] < 1:
        raise ShapeError("feature batch is empty")
    return t


def kernel_eval(kernel: Kernel, x, y) -> float:
    """Evaluate the kernel on a single pair of vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"kernel arguments differ in dimension: {x.shape} vs {y.shape}")
    if kernel.kind == "inner_product":
        return float(x @ y)
    d = x - y
    return float(np.exp(-(d @ d) / (2.0 * kernel.bandwidth**2)))


def _gram(kernel: Kernel, a: Tensor, b: Tensor) -> Tensor:
    if kernel.kind == "inner_product":
        return matmul(a, b.T)
    aa = tsum(a * a, axis=1, keepdims=True)
    bb = tsum(b * b, axis=1, keepdims=True)
    sq = aa - 2.0 * matmul(a, b.T) + bb.T
    return texp(sq * (-1.0 / (2.0 * kernel.bandwidth**2)))


def _canonical_order(x: Tensor, y: Tensor):
    """Deterministic operand ordering so the estimator is exactly symmetric."""
    if x.data.shape != y.data.shape:
        key_x = (x.data.shape[0], x.data.shape[1])
        key_y = (y.data.shape[0], y.data.shape[1])
        return (x, y) if key_x <= key_y else (y, x)
    bx = np.ascontiguousarray(x.data).tobytes()
    by = np.ascontiguousarray(y.data).tobytes()
    return (x, y) if bx <= by else (y, x)


def mmd2_sample(x, y, kernel: Kernel = Kernel()) -> Tensor:
    """Squared sample MMD between two feature batches (biased V-statistic)."""
    x = _as_matrix(x)
    y = _as_matrix(y)
    if x.data.shape[1] != y.data.shape[1]:
        raise ShapeError(
            f"feature dimensions differ: {x.data.shape[1]} vs {y.data.shape[1]}"
        )
    a, b = _canonical_order(x, y)
    m = a.data.shape[0]
    n = b.data.shape[0]
    term_aa = tsum(_gram(kernel, a, a)) * (1.0 / (m * m))
    term_bb = tsum(_gram(kernel, b, b)) * (1.0 / (n * n))
    term_ab = tsum(_gram(kernel, a, b)) * (2.0 / (m * n))
    return term_aa + term_bb - term_ab


def witness_eval(point, x, y, kernel: Kernel = Kernel()) -> float:
    """Empirical witness: mean kernel response over X minus the mean over Y."""
    point = np.asarray(point, dtype=np.float64)
    x = _as_matrix(x)
    y = _as_matrix(y)
    if point.shape[-1] != x.data.shape[1] or x.data.shape[1] != y.data.shape[1]:
        raise ShapeError("witness point and batches must share one dimension")
    kx = np.array([kernel_eval(kernel, point, row) for row in x.data])
    ky = np.array([kernel_eval(kernel, point, row) for row in y.data])
    return float(kx.mean() - ky.mean())
