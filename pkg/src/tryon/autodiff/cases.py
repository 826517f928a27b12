"""Reproducible gradient-check cases, one per primitive kind.

Shared by the test suite and ``tryon selftest``. Each case draws its
constants up front so the checked function is deterministic.
"""
import numpy as np

from . import ops
from .tensor import Tensor


def leaf(rng, *shape, lo=-2.0, hi=2.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def away_from_zero(rng, *shape, gap=0.05):
    v = rng.uniform(-2, 2, size=shape)
    v = np.where(np.abs(v) < gap, np.sign(v + 1e-12) * gap * 2, v)
    return Tensor(v, requires_grad=True)


def weighted(fn):
    """Project an op output to a scalar with fixed random weights."""
    cache = {}

    def f(*args):
        out = fn(*args)
        if "w" not in cache:
            cache["w"] = np.random.default_rng(99).normal(size=out.shape)
        return ops.sum(ops.mul(out, Tensor(cache["w"])))

    return f


def primitive_case(kind, rng):
    """Return (scalar function, leaf) for one primitive; constants drawn up front."""
    n = lambda *shape: Tensor(rng.normal(size=shape))  # noqa: E731
    if kind == "add":
        c = n(1, 4)
        return weighted(lambda x: ops.add(x, c)), leaf(rng, 3, 4)
    if kind == "sub":
        c = n(3, 4)
        return weighted(lambda x: ops.sub(c, x)), leaf(rng, 3, 1)
    if kind == "mul":
        return weighted(lambda x: ops.mul(x, x)), leaf(rng, 3, 4)
    if kind == "scalar-mul":
        return weighted(lambda x: ops.scalar_mul(x, -2.5)), leaf(rng, 5)
    if kind == "matmul":
        c = n(4, 2)
        return weighted(lambda x: ops.matmul(x, c)), leaf(rng, 3, 4)
    if kind == "conv2d":
        k = n(3, 2, 3, 3)
        return weighted(lambda x: ops.conv2d(x, k, stride=2, padding=1)), leaf(rng, 2, 2, 6, 5)
    if kind == "conv2d-kernel":
        img, b = n(2, 2, 5, 5), n(3)
        return weighted(lambda w: ops.conv2d(img, w, b, padding=1)), leaf(rng, 3, 2, 3, 3)
    if kind == "conv2d-bias":
        img, k = n(1, 2, 5, 5), n(3, 2, 3, 3)
        return weighted(lambda b: ops.conv2d(img, k, b, stride=2)), leaf(rng, 3)
    if kind == "transposed-conv2d":
        k = n(2, 3, 4, 4)
        return weighted(lambda x: ops.conv_transpose2d(x, k, stride=2, padding=1)), leaf(rng, 2, 2, 3, 4)
    if kind == "transposed-conv2d-kernel":
        img = n(2, 2, 3, 3)
        return weighted(lambda w: ops.conv_transpose2d(img, w, stride=2, padding=1)), leaf(rng, 2, 3, 4, 4)
    if kind == "relu":
        return weighted(ops.relu), away_from_zero(rng, 4, 5)
    if kind == "sigmoid":
        return weighted(ops.sigmoid), leaf(rng, 4, 5)
    if kind == "softmax":
        return weighted(ops.spatial_softmax), leaf(rng, 2, 4, 5)
    if kind == "log":
        return weighted(ops.log), leaf(rng, 6, lo=0.3, hi=3.0)
    if kind == "exp":
        return weighted(ops.exp), leaf(rng, 6)
    if kind == "power":
        e = rng.uniform(1.1, 2.1, size=(3, 4))
        return weighted(lambda x: ops.power(x, e)), leaf(rng, 3, 4, lo=0.1, hi=2.0)
    if kind == "mean":
        return weighted(lambda x: ops.mean(x, axis=1)), leaf(rng, 3, 4, 2)
    if kind == "sum":
        return weighted(lambda x: ops.sum(x, axis=(0, 2), keepdims=True)), leaf(rng, 3, 4, 2)
    if kind == "channel-concat":
        c = n(2, 1, 3, 3)
        return weighted(lambda x: ops.concat([x, ops.scalar_mul(x, 3.0), c], axis=1)), leaf(rng, 2, 2, 3, 3)
    if kind == "max-pool2d":
        return weighted(lambda x: ops.max_pool2d(x, 2, 2)), leaf(rng, 2, 2, 4, 6)
    if kind == "max-pool2d-stride1":
        return weighted(lambda x: ops.max_pool2d(x, 3, 1, padding=1)), leaf(rng, 1, 2, 4, 4)
    if kind == "global-avg-pool":
        return weighted(ops.global_avg_pool), leaf(rng, 2, 3, 4, 4)
    if kind == "global-max-pool":
        return weighted(ops.global_max_pool), leaf(rng, 2, 3, 4, 4)
    if kind == "broadcast":
        return weighted(lambda x: ops.broadcast_to(x, (2, 3, 4))), leaf(rng, 3, 1)
    if kind == "abs":
        return weighted(ops.abs), away_from_zero(rng, 7)
    if kind == "max":
        return weighted(lambda x: ops.max_reduce(x, axis=1, keepdims=True)), leaf(rng, 2, 5, 3)
    if kind == "reshape":
        return weighted(lambda x: ops.reshape(x, (6, 2))), leaf(rng, 3, 4)
    if kind == "log-softmax":
        return weighted(lambda x: ops.log_softmax(x, axis=1)), leaf(rng, 2, 4, 3)
    if kind == "group-norm":
        g, b = n(16), n(16)
        return weighted(lambda x: ops.group_norm(x, g, b)), leaf(rng, 2, 16, 3, 3)
    if kind == "group-norm-affine":
        x = n(2, 8, 3, 3)
        return weighted(lambda g: ops.group_norm(x, g, Tensor(np.zeros(8)), group_size=4)), leaf(rng, 8)
    raise KeyError(kind)


PRIMITIVE_KINDS = [
    "add", "sub", "mul", "scalar-mul", "matmul", "conv2d", "conv2d-kernel", "conv2d-bias",
    "transposed-conv2d", "transposed-conv2d-kernel", "relu", "sigmoid", "softmax", "log", "exp",
    "power", "mean", "sum", "channel-concat", "max-pool2d", "max-pool2d-stride1",
    "global-avg-pool", "global-max-pool", "broadcast", "abs", "max", "reshape", "log-softmax",
    "group-norm", "group-norm-affine",
]
