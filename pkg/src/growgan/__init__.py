"""Semi-supervised GAN training with self-growing networks.

A small, numpy-backed stack: a reverse-mode tensor engine, DCGAN-style
generator/discriminator builders driven by a compact layer notation, kernel
maximum-mean-discrepancy feature matching, confidence-threshold pseudo
labeling, and function-preserving growth from shallow to deeper networks.
"""

from .tensor import Tensor, Parameter, conv2d, transposed_conv2d, activation, global_avg_pool, log_sum_exp

__all__ = [
    "Tensor",
    "Parameter",
    "conv2d",
    "transposed_conv2d",
    "activation",
    "global_avg_pool",
    "log_sum_exp",
]
