"""The (k+1)-class semi-supervised discriminator objective and the feature
matching generator objectives.

The discriminator head emits k+1 raw logits; pinning the fake logit to zero
(subtracting it from the k real-class logits) gives the equivalent k-logit
form in which every term reduces to a log-sum-exp:

    generated:  -log(1 / (Z + 1))      = softplus(LSE(g))
    labeled:    -log(e^l_true / Z)     = LSE(l) - l_true
    unlabeled:  -log(Z / (Z + 1))      = softplus(-LSE(u))

with Z the sum of exponentiated real-class logits per sample. Inner sums run
over the k classes of each sample; the outer reduction is the batch mean.
"""
from __future__ import annotations

import numpy as np

from .mmd import Kernel, mmd2_sample
from .tensor import ShapeError, Tensor, log_sum_exp, softplus, tabs, tmean, tsum


def real_class_logits(logits_k1: Tensor, num_classes: int) -> Tensor:
    """Shift a (k+1)-logit batch so the fake logit is zero; returns the k columns."""
    if logits_k1.data.shape[1] != num_classes + 1:
        raise ShapeError(
            f"expected {num_classes + 1} logits per row, got {logits_k1.data.shape[1]}"
        )
    real = _slice_cols(logits_k1, 0, num_classes)
    fake_col = _slice_cols(logits_k1, num_classes, num_classes + 1)
    return real - fake_col


def _slice_cols(t: Tensor, start, stop):
    """Column slice with gradient scatter-back."""
    out_data = t.data[:, start:stop].copy()
    out = Tensor(out_data, requires_grad=t.requires_grad, _parents=(t,))
    if out.requires_grad:

        def _bw(g):
            full = np.zeros_like(t.data)
            full[:, start:stop] = g
            t._accumulate(full)

        out._backward = _bw
    return out


def _check_logits(logits, k, name):
    t = logits if isinstance(logits, Tensor) else Tensor(logits)
    if t.data.ndim != 2 or t.data.shape[0] < 1:
        raise ShapeError(f"{name} logits must be a nonempty 2-D batch, got {t.data.shape}")
    if t.data.shape[1] != k:
        raise ShapeError(f"{name} logits have {t.data.shape[1]} classes, expected {k}")
    return t


def discriminator_loss(labeled_logits, labels_onehot, unlabeled_logits, generated_logits) -> Tensor:
    """Mean semi-supervised loss over the three batches of k-class logits."""
    labels = np.asarray(labels_onehot, dtype=np.float64)
    if labels.ndim != 2:
        raise ShapeError(f"labels must be one-hot rows, got shape {labels.shape}")
    k = labels.shape[1]
    lab = _check_logits(labeled_logits, k, "labeled")
    unl = _check_logits(unlabeled_logits, k, "unlabeled")
    gen = _check_logits(generated_logits, k, "generated")
    if lab.data.shape[0] != labels.shape[0]:
        raise ShapeError("labeled logits and labels disagree on batch size")

    lse_lab = log_sum_exp(lab, axis=1)
    true_logit = tsum(lab * Tensor(labels.astype(lab.dtype)), axis=1)
    labeled_term = tmean(lse_lab - true_logit)
    generated_term = tmean(softplus(log_sum_exp(gen, axis=1)))
    unlabeled_term = tmean(softplus(-log_sum_exp(unl, axis=1)))
    return generated_term + labeled_term + unlabeled_term


def labeled_cross_entropy(logits_k, labels_onehot) -> Tensor:
    """Mean k-class cross entropy; the labeled term of the discriminator loss."""
    labels = np.asarray(labels_onehot, dtype=np.float64)
    lab = _check_logits(logits_k, labels.shape[1], "labeled")
    lse = log_sum_exp(lab, axis=1)
    true_logit = tsum(lab * Tensor(labels.astype(lab.dtype)), axis=1)
    return tmean(lse - true_logit)


def generator_loss(real_features, fake_features, metric="mmd", kernel: Kernel = Kernel()) -> Tensor:
    """Feature matching objective between real and generated GAP features."""
    if metric == "mmd":
        return mmd2_sample(real_features, fake_features, kernel)
    if metric == "l1":
        real = real_features if isinstance(real_features, Tensor) else Tensor(real_features)
        fake = fake_features if isinstance(fake_features, Tensor) else Tensor(fake_features)
        if real.data.shape[0] < 1 or fake.data.shape[0] < 1:
            raise ShapeError("feature batch is empty")
        if real.data.shape[1] != fake.data.shape[1]:
            raise ShapeError(
                f"feature dimensions differ: {real.data.shape[1]} vs {fake.data.shape[1]}"
            )
        return tsum(tabs(tmean(real, axis=0) - tmean(fake, axis=0)))
    raise ValueError(f"unknown feature matching metric {metric!r}")


def softmax_probabilities(logits_k: np.ndarray) -> np.ndarray:
    """Row-wise softmax over the k real classes (shift-invariant, stable)."""
    z = logits_k - logits_k.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def confidence(logits_row) -> tuple:
    """(argmax class, max softmax probability) over the k real classes."""
    row = np.asarray(logits_row, dtype=np.float64).reshape(1, -1)
    if row.shape[1] < 2:
        raise ShapeError("confidence needs at least two classes")
    probs = softmax_probabilities(row)[0]
    cls = int(np.argmax(probs))
    return cls, float(probs[cls])


def confidences(logits_k: np.ndarray):
    """Vectorized confidence over a batch: (classes, probabilities)."""
    probs = softmax_probabilities(np.asarray(logits_k, dtype=np.float64))
    cls = probs.argmax(axis=1)
    return cls, probs[np.arange(len(cls)), cls]


def implied_probabilities(logits_k: np.ndarray):
    """The k+1 class probabilities implied by k logits with the fake logit at 0.

    Returns (real_probs, fake_prob) with real_probs[i, c] = e^{l_c} / (Z + 1)
    and fake_prob[i] = 1 / (Z + 1).
    """
    logits_k = np.asarray(logits_k, dtype=np.float64)
    shift = np.maximum(logits_k.max(axis=1, keepdims=True), 0.0)
    e = np.exp(logits_k - shift)
    z = e.sum(axis=1, keepdims=True) + np.exp(-shift)
    return e / z, (np.exp(-shift) / z)[:, 0]
