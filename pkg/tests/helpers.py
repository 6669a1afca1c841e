"""Shared test oracles: finite differences, naive convolution, tiny models."""
import numpy as np

from growgan import layers as L
from growgan.tensor import Tensor


def numeric_grad(f, array, h=1e-5, sample=None):
    """Central finite differences of scalar-valued f with respect to array.

    ``sample`` limits the check to every n-th flat entry for speed.
    """
    flat = array.ravel()
    grad = np.zeros_like(flat)
    indices = range(0, flat.size, sample or 1)
    for i in indices:
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(array.shape), list(indices)


def rel_err(analytic, numeric):
    denom = max(1.0, abs(analytic), abs(numeric))
    return abs(analytic - numeric) / denom


def max_rel_err(analytic_arr, numeric_arr, indices):
    a, n = analytic_arr.ravel(), numeric_arr.ravel()
    return max(rel_err(a[i], n[i]) for i in indices)


def naive_conv2d(x, w, stride, pad):
    """Direct quadruple-loop correlation oracle."""
    n, c, h, wd = x.shape
    o, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wd + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for a in range(k):
                            for d in range(k):
                                acc += xp[b, ic, i * stride + a, j * stride + d] * w[oc, ic, a, d]
                    out[b, oc, i, j] = acc
    return out


def away_from_kinks(rng, shape, margin=1e-3):
    """Random values with |x| bounded away from zero, for relu-family checks."""
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < margin, margin * np.sign(x) + margin * (x == 0), x)
    return x


def tiny_discriminator(rng, k=3, channels=(4, 6), image=6):
    """Small conv->bn->lrelu stack with GAP and a (k+1)-way head."""
    layers = []
    c = 2
    for i, out_c in enumerate(channels):
        layers.append(L.Conv2d(f"conv{i}", c, out_c, 3, 1 if i == 0 else 2, rng))
        layers.append(L.BatchNorm(f"bn{i}", out_c))
        layers.append(L.Activation(f"act{i}", "leaky_relu"))
        c = out_c
    layers.append(L.GlobalAvgPool("gap"))
    layers.append(L.Dense("fc", c, k + 1, rng))
    return L.Model(layers, role="discriminator", stage="baby", num_classes=k, input_shape=(2, image, image))


def train_forward(model, x, seed=0):
    return model.forward(Tensor(x), L.Context(L.TRAIN, np.random.default_rng(seed)))
