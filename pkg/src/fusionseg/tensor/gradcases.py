"""Registry of differentiable ops with input generators for finite-difference checks.

Each entry maps a name to ``(fn, make_inputs)``; ``make_inputs(rng)`` returns leaf
tensors placed away from kinks (|x| bounded from 0 for abs/relu, distinct values
for max / max-pool) so central differences are well defined.
"""
from __future__ import annotations

import numpy as np

from . import ops
from .core import Tensor


def _leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _n(rng, *shape):
    return _leaf(rng.standard_normal(shape))


def _away(rng, *shape, gap=0.1):
    x = rng.standard_normal(shape)
    return _leaf(np.where(x >= 0, x + gap, x - gap))


def _pos(rng, *shape):
    return _leaf(rng.uniform(0.5, 2.0, shape))


def _distinct(rng, *shape, gap=1e-3):
    # a random permutation of well-separated levels plus jitter
    n = int(np.prod(shape))
    levels = rng.permutation(n) * (10 * gap) + rng.uniform(0, gap, n)
    return _leaf((levels / n).reshape(shape))


def _maximum_inputs(rng):
    a = rng.standard_normal((3, 4))
    b = a + np.where(rng.random((3, 4)) < 0.5, 0.2, -0.2) + 0.05 * rng.standard_normal((3, 4))
    return [_leaf(a), _leaf(b)]


OP_CASES = {
    "add": (ops.add, lambda r: [_n(r, 3, 4), _n(r, 3, 4)]),
    "add_broadcast": (ops.add, lambda r: [_n(r, 2, 3, 4), _n(r, 1, 3, 1)]),
    "sub": (ops.sub, lambda r: [_n(r, 3, 4), _n(r, 4)]),
    "mul": (ops.mul, lambda r: [_n(r, 3, 4), _n(r, 3, 1)]),
    "div": (ops.div, lambda r: [_n(r, 3, 4), _away(r, 3, 4, gap=0.5)]),
    "maximum": (ops.maximum, _maximum_inputs),
    "neg": (ops.neg, lambda r: [_n(r, 5)]),
    "abs": (ops.abs_, lambda r: [_away(r, 3, 4)]),
    "square": (ops.square, lambda r: [_n(r, 3, 4)]),
    "sqrt": (ops.sqrt, lambda r: [_pos(r, 3, 4)]),
    "exp": (ops.exp, lambda r: [_n(r, 3, 4)]),
    "log": (ops.log, lambda r: [_pos(r, 3, 4)]),
    "sigmoid": (ops.sigmoid, lambda r: [_n(r, 3, 4)]),
    "relu": (ops.relu, lambda r: [_away(r, 3, 4)]),
    "tanh": (ops.tanh, lambda r: [_n(r, 3, 4)]),
    "sum_axis": (lambda x: ops.sum_(x, axis=1), lambda r: [_n(r, 3, 4, 2)]),
    "mean_axes": (lambda x: ops.mean(x, axis=(0, 2), keepdims=True), lambda r: [_n(r, 3, 4, 2)]),
    "reshape": (lambda x: ops.reshape(x, (4, 6)), lambda r: [_n(r, 2, 3, 4)]),
    "transpose": (lambda x: ops.transpose(x, (2, 0, 1)), lambda r: [_n(r, 2, 3, 4)]),
    "concat": (lambda a, b: ops.concat([a, b], axis=1), lambda r: [_n(r, 2, 3), _n(r, 2, 2)]),
    "slice": (lambda x: ops.slice_(x, (slice(None), slice(1, 4, 2))), lambda r: [_n(r, 3, 5)]),
    "matmul": (ops.matmul, lambda r: [_n(r, 3, 4), _n(r, 4, 2)]),
    "matmul_batched": (ops.matmul, lambda r: [_n(r, 2, 3, 4), _n(r, 2, 4, 5)]),
    "conv2d": (lambda x, w: ops.conv2d(x, w, padding=1), lambda r: [_n(r, 2, 3, 5, 5), _n(r, 4, 3, 3, 3)]),
    "conv2d_groups": (lambda x, w: ops.conv2d(x, w, padding=1, groups=2),
                      lambda r: [_n(r, 1, 4, 4, 4), _n(r, 4, 2, 3, 3)]),
    "conv2d_strided": (lambda x, w: ops.conv2d_strided(x, w, stride=2, padding=1),
                       lambda r: [_n(r, 1, 2, 6, 6), _n(r, 3, 2, 3, 3)]),
    "conv_transpose2d": (lambda x, w: ops.conv_transpose2d(x, w, stride=2, padding=1),
                         lambda r: [_n(r, 1, 2, 3, 3), _n(r, 2, 3, 3, 3)]),
    "dilate2d": (lambda x: ops.dilate2d(x, 2), lambda r: [_n(r, 1, 2, 3, 3)]),
    "flip2d": (ops.flip2d, lambda r: [_n(r, 1, 2, 3, 4)]),
    "avg_pool2d": (ops.avg_pool2d, lambda r: [_n(r, 1, 2, 4, 4)]),
    "max_pool2d": (ops.max_pool2d, lambda r: [_distinct(r, 1, 2, 4, 4)]),
    "upsample_nearest2x": (ops.upsample_nearest2x, lambda r: [_n(r, 1, 2, 3, 3)]),
    "softmax": (lambda x: ops.softmax(x, axis=1), lambda r: [_n(r, 2, 4, 3)]),
    "layer_norm": (ops.layer_norm, lambda r: [_n(r, 3, 6)]),
    "sobel_magnitude": (ops.sobel_magnitude, lambda r: [_n(r, 1, 1, 5, 5)]),
    "pad_edge": (lambda x: ops.pad_edge(x, 2), lambda r: [_n(r, 1, 2, 3, 4)]),
    "gaussian_blur_same": (lambda x: ops.gaussian_blur(x, 1.0, 5), lambda r: [_n(r, 1, 2, 6, 6)]),
    "gaussian_blur_valid": (lambda x: ops.gaussian_blur(x, 1.5, 5, padding="valid"), lambda r: [_n(r, 1, 1, 7, 7)]),
    "var": (lambda x: ops.var(x, axis=1), lambda r: [_n(r, 3, 5)]),
    "cov": (lambda a, b: ops.cov(a, b, axis=(1, 2)), lambda r: [_n(r, 2, 3, 3), _n(r, 2, 3, 3)]),
    "pearson": (lambda a, b: ops.pearson(a, b, axis=(2, 3)), lambda r: [_n(r, 2, 2, 3, 3), _n(r, 2, 2, 3, 3)]),
}
