"""Differentiable primitives.

Every function takes Tensors (or array-likes for constant operands) and
returns a Tensor whose backward closure produces one gradient per parent.
Image tensors use NCHW layout.
"""
from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, as_tensor, make_node


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    out = a.data + b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node(out, (a, b), back, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    out = a.data - b.data

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node(out, (a, b), back, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    out = a.data * b.data

    def back(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), back, "mul")


def scalar_mul(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return make_node(a.data * c, (a,), lambda g: (g * c,), "scalar-mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), back, "matmul")


def relu(x) -> Tensor:
    x = as_tensor(x)
    pos = x.data > 0
    return make_node(np.where(pos, x.data, 0.0), (x,), lambda g: (g * pos,), "relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    d = x.data
    # split by sign so neither branch exponentiates a large positive number
    e = np.exp(-np.abs(d))
    out = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return make_node(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def log(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return make_node(out, (x,), lambda g: (g / x.data,), "log")


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return make_node(out, (x,), lambda g: (g * out,), "exp")


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    s = np.sign(x.data)
    return make_node(np.abs(x.data), (x,), lambda g: (g * s,), "abs")


def power(base, exponent) -> Tensor:
    """``base ** exponent`` elementwise; the exponent is a constant array.

    No gradient flows into the exponent.
    """
    base = as_tensor(base)
    e = exponent.data if isinstance(exponent, Tensor) else np.asarray(exponent, dtype=np.float64)
    try:
        np.broadcast_shapes(base.shape, e.shape)
    except ValueError:
        raise ShapeError(f"power: base {base.shape} and exponent {e.shape} differ") from None
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        out = np.power(base.data, e)

    def back(g):
        with np.errstate(invalid="ignore", divide="ignore"):
            d = e * np.power(base.data, e - 1.0)
        return (_unbroadcast(g * d, base.shape),)

    return make_node(out, (base,), back, "power")


# -- reductions and shape ops -------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape),)

    return make_node(out, (x,), back, "sum")


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape),)

    return make_node(out, (x,), back, "mean")


def max_reduce(x, axis, keepdims: bool = False) -> Tensor:
    """Maximum along ``axis``; tied maxima share the gradient equally."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    m = x.data.max(axis=axes, keepdims=True)
    hit = x.data == m
    share = hit / hit.sum(axis=axes, keepdims=True)
    out = m if keepdims else m.reshape([n for i, n in enumerate(m.shape) if i not in axes])

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (g * share,)

    return make_node(out, (x,), back, "max")


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return make_node(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def broadcast_to(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot expand {x.shape} to {shape}") from None
    return make_node(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast")


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis`` (channel axis by default)."""
    xs = [as_tensor(x) for x in xs]
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis % len(ref)
        ):
            raise ShapeError(f"concat: shapes {ref} and {x.shape} differ off axis {axis}")
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([0] + [x.shape[axis] for x in xs])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs))
        )

    return make_node(out, xs, back, "concat")


# -- softmax family -----------------------------------------------------------

def spatial_softmax(x) -> Tensor:
    """Softmax over the flattened trailing two (spatial) axes."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"spatial_softmax needs at least 2 dims, got {x.shape}")
    lead = x.shape[:-2]
    flat = x.data.reshape(lead + (-1,))
    z = flat - flat.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)
    out = s.reshape(x.shape)

    def back(g):
        return (out * (g - (g * out).sum(axis=(-2, -1), keepdims=True)),)

    return make_node(out, (x,), back, "softmax")


def log_softmax(x, axis: int = 1) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    soft = np.exp(out)

    def back(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (x,), back, "log-softmax")


# -- convolution --------------------------------------------------------------

def _check_stride(stride: int) -> None:
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Channel-last patches: ``xp`` (B,Hp,Wp,C) -> (B*Ho*Wo, kh*kw*C)."""
    b, _, _, c = xp.shape
    cols = np.empty((b, ho, wo, kh, kw, c))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j, :] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
    return cols.reshape(b * ho * wo, kh * kw * c)


def _col2im(dcols: np.ndarray, shape, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of ``_im2col``: scatter-add (B,Ho,Wo,kh,kw,C) patches into (B,Hp,Wp,C)."""
    out = np.zeros(shape)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    return out


def _nhwc_padded(x: np.ndarray, padding: int) -> np.ndarray:
    xt = x.transpose(0, 2, 3, 1)
    if padding:
        return np.pad(xt, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    return np.ascontiguousarray(xt)


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, ``x`` (B,Cin,H,W), ``w`` (Cout,Cin,kh,kw)."""
    x, w = as_tensor(x), as_tensor(w)
    _check_stride(stride)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    bsz, cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {cin_w}")
    if kh < 1 or kw < 1:
        raise ShapeError("conv2d: kernel size must be >= 1")
    if padding < 0:
        raise ShapeError("conv2d: padding must be >= 0")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}")
    xp = _nhwc_padded(x.data, padding)
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    # columns ordered (kh, kw, cin) to match the patches
    wmat = w.data.transpose(0, 2, 3, 1).reshape(cout, -1)
    out = (cols @ wmat.T).reshape(bsz, ho, wo, cout)
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
        out = out + b.data
        parents.append(b)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def back(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        gw = None
        if w.requires_grad:
            gw = (g2.T @ cols).reshape(cout, kh, kw, cin).transpose(0, 3, 1, 2)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(bsz, ho, wo, kh, kw, cin)
            dxp = _col2im(dcols, xp.shape, kh, kw, stride, ho, wo)
            if padding:
                dxp = dxp[:, padding:padding + h, padding:padding + wd, :]
            gx = np.ascontiguousarray(dxp.transpose(0, 3, 1, 2))
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return make_node(out, parents, back, "conv2d")


def conv_transpose2d(x, w, b=None, stride: int = 2, padding: int = 0) -> Tensor:
    """Transposed convolution, ``x`` (B,Cin,H,W), ``w`` (Cin,Cout,kh,kw).

    Output side is ``(H - 1) * stride - 2 * padding + kh``.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_stride(stride)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv_transpose2d expects 4-D input and kernel, got {x.shape} and {w.shape}")
    bsz, cin, h, wd = x.shape
    cin_w, cout, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv_transpose2d: input has {cin} channels but kernel expects {cin_w}")
    hf, wf = (h - 1) * stride + kh, (wd - 1) * stride + kw
    ho, wo = hf - 2 * padding, wf - 2 * padding
    if ho < 1 or wo < 1 or padding < 0:
        raise ShapeError("conv_transpose2d: padding removes the whole output")
    xflat = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, cin)
    wmat = w.data.transpose(0, 2, 3, 1).reshape(cin, -1)  # (cin, kh*kw*cout)
    cols = (xflat @ wmat).reshape(bsz, h, wd, kh, kw, cout)
    full = _col2im(cols, (bsz, hf, wf, cout), kh, kw, stride, h, wd)
    out = full[:, padding:padding + ho, padding:padding + wo, :]
    parents = [x, w]
    if b is not None:
        b = as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv_transpose2d: bias shape {b.shape} != ({cout},)")
        out = out + b.data
        parents.append(b)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def back(g):
        gfull = np.zeros((bsz, hf, wf, cout))
        gfull[:, padding:padding + ho, padding:padding + wo, :] = g.transpose(0, 2, 3, 1)
        gcols = _im2col(gfull, kh, kw, stride, h, wd)
        gx = None
        if x.requires_grad:
            gx = np.ascontiguousarray((gcols @ wmat.T).reshape(bsz, h, wd, cin).transpose(0, 3, 1, 2))
        gw = None
        if w.requires_grad:
            gw = (xflat.T @ gcols).reshape(cin, kh, kw, cout).transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return make_node(out, parents, back, "conv-transpose2d")


# -- pooling ------------------------------------------------------------------

def max_pool2d(x, kernel: int = 2, stride: int = 2, padding: int = 0) -> Tensor:
    x = as_tensor(x)
    _check_stride(stride)
    if kernel < 1:
        raise ShapeError("max_pool2d: kernel must be >= 1")
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d expects 4-D input, got {x.shape}")
    bsz, c, h, wd = x.shape
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (wd + 2 * padding - kernel) // stride + 1
    pad = ((0, 0), (0, 0), (padding, padding), (padding, padding))
    xp = np.pad(x.data, pad, constant_values=-np.inf) if padding else x.data
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    win = win.reshape(bsz, c, ho, wo, kernel * kernel)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gp = np.zeros(xp.shape)
        for k in range(kernel * kernel):
            i, j = divmod(k, kernel)
            gp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * (arg == k)
        return (gp[:, :, padding:padding + h, padding:padding + wd] if padding else gp,)

    return make_node(np.ascontiguousarray(out), (x,), back, "max-pool2d")


def global_avg_pool(x) -> Tensor:
    """(B,C,H,W) -> (B,C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects 4-D input, got {x.shape}")
    t = mean(x, axis=(2, 3))
    t.op = "global-avg-pool"
    return t


def global_max_pool(x) -> Tensor:
    """(B,C,H,W) -> (B,C)."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"global_max_pool expects 4-D input, got {x.shape}")
    t = max_reduce(x, axis=(2, 3))
    t.op = "global-max-pool"
    return t


# -- normalization ------------------------------------------------------------

def group_norm(x, gamma, beta, group_size: int = 8, eps: float = 1e-5) -> Tensor:
    """Group normalization over (B,C,H,W) with ``min(group_size, C)`` channels per group."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    bsz, c, h, wd = x.shape
    gs = min(group_size, c)
    if c % gs:
        raise ShapeError(f"group_norm: {c} channels not divisible into groups of {gs}")
    groups = c // gs
    xg = x.data.reshape(bsz, groups, -1)
    mu = xg.mean(axis=-1, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(x.shape)
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]
    n = xg.shape[-1]

    def back(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gh = (g * gamma.data[None, :, None, None]).reshape(bsz, groups, n)
            xh = xhat.reshape(bsz, groups, n)
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xh * (gh * xh).mean(axis=-1, keepdims=True))
            gx = gx.reshape(x.shape)
        return gx, ggamma, gbeta

    return make_node(out, (x, gamma, beta), back, "group-norm")


PRIMITIVES = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "matmul": matmul,
    "conv2d": conv2d,
    "transposed-conv2d": conv_transpose2d,
    "relu": relu,
    "sigmoid": sigmoid,
    "softmax": spatial_softmax,
    "log": log,
    "exp": exp,
    "power": power,
    "mean": mean,
    "sum": sum,
    "channel-concat": concat,
    "max-pool2d": max_pool2d,
    "global-avg-pool": global_avg_pool,
    "global-max-pool": global_max_pool,
    "broadcast": broadcast_to,
    # supporting ops beyond the required set
    "abs": abs,
    "max": max_reduce,
    "reshape": reshape,
    "log-softmax": log_softmax,
    "group-norm": group_norm,
}


def primitive_forward(kind: str, inputs: Sequence, attrs: Optional[dict] = None) -> Tensor:
    """Dispatch a primitive by name, e.g. ``primitive_forward("relu", [x])``."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown op kind '{kind}'") from None
    if kind == "channel-concat":
        return fn(list(inputs), **(attrs or {}))
    return fn(*inputs, **(attrs or {}))
