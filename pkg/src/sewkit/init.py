"""Parameter initialization.

The reference training recipes never state an initialization, so the
choices here are deliberate and documented: truncated normal (std 0.02,
clipped at two sigma) for affine and attention weights, Kaiming-style
uniform for convolution kernels, zeros for biases, ones for norm gains.
Seeds are therefore meaningful: two builds from the same seed are
bit-identical.
"""

import numpy as np

from .tensor import Tensor


def trunc_normal(rng, shape, std=0.02, dtype=np.float32):
    data = rng.normal(0.0, std, size=shape)
    data = np.clip(data, -2.0 * std, 2.0 * std)
    return Tensor(data.astype(dtype), requires_grad=True)


def kaiming_uniform(rng, shape, fan_in, dtype=np.float32):
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True)


def zeros(shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def ones(shape, dtype=np.float32):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True)


def uniform(rng, shape, low=0.0, high=1.0, dtype=np.float32):
    return Tensor(rng.uniform(low, high, size=shape).astype(dtype), requires_grad=True)
