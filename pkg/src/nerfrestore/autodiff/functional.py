"""Differentiable operations over :class:`Tensor`.

Broadcasting is limited to tensor-scalar combinations; anything else needs an
explicit :func:`reshape` or :func:`broadcast_to`.  Images use NCHW layout.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, as_tensor, make_result


class ShapeError(ValueError):
    pass


def _is_scalar(x) -> bool:
    return isinstance(x, (int, float, np.floating, np.integer)) or (
        isinstance(x, Tensor) and x.ndim == 0
    ) or (isinstance(x, np.ndarray) and x.ndim == 0)


def _check_same(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def full_like(x: Tensor, value: float) -> Tensor:
    return Tensor(np.full_like(x.data, value))


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and _is_scalar(b):
        return make_result(a.data + a.data.dtype.type(b), (a,), lambda g: (g,), "add_scalar")
    b = as_tensor(b)
    if a.ndim == 0 and b.ndim > 0:
        a, b = b, a
    if b.ndim == 0 and a.ndim > 0:
        return make_result(a.data + b.data, (a, b), lambda g: (g, g.sum().reshape(())), "add")
    _check_same("add", a, b)
    return make_result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor) and _is_scalar(b):
        return add(a, -b)
    return add(a, neg(as_tensor(b)))


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and _is_scalar(b):
        s = a.data.dtype.type(b)
        return make_result(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    b = as_tensor(b)
    if a.ndim == 0 and b.ndim > 0:
        a, b = b, a
    if b.ndim == 0 and a.ndim > 0:
        ad, bd = a.data, b.data
        return make_result(ad * bd, (a, b), lambda g: (g * bd, (g * ad).sum().reshape(())), "mul")
    _check_same("mul", a, b)
    ad, bd = a.data, b.data
    return make_result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor) and _is_scalar(b):
        return mul(a, 1.0 / float(b))
    b = as_tensor(b)
    if a.ndim == 0 and b.ndim > 0:
        a = Tensor(np.full_like(b.data, a.data)) if not a.requires_grad else broadcast_to(a, b.shape)
    if b.ndim == 0 and a.ndim > 0:
        b = broadcast_to(b, a.shape)
    _check_same("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bw(g):
        gb = g / bd
        return gb, -gb * out

    return make_result(out, (a, b), bw, "div")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    return make_result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def abs(a: Tensor) -> Tensor:  # noqa: A001
    ad = a.data
    return make_result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result(a.data * mask, (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(a.data > 0, 1.0, slope).astype(a.dtype)
    return make_result(a.data * factor, (a,), lambda g: (g * factor,), "leaky_relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return make_result(s, (a,), lambda g: (g * s * (1 - s),), "sigmoid")


def silu(a: Tensor) -> Tensor:
    x = a.data
    s = _sigmoid(x)
    return make_result(x * s, (a,), lambda g: (g * (s * (1 + x * (1 - s))),), "silu")


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return make_result(t, (a,), lambda g: (g * (1 - t * t),), "tanh")


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0, x).astype(x.dtype)
    return make_result(out, (a,), lambda g: (g * _sigmoid(x),), "softplus")


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = -np.logaddexp(0, -x).astype(x.dtype)
    return make_result(out, (a,), lambda g: (g * _sigmoid(-x),), "log_sigmoid")


# ---------------------------------------------------------------- reductions


def _expand_reduced(g: np.ndarray, shape: tuple, axis) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    return np.broadcast_to(np.expand_dims(g, axes), shape)


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))
    return make_result(out, (a,), lambda g: (np.array(_expand_reduced(g, shape, axis), order="C"),), "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    out = np.asarray(a.data.mean(axis=axis))
    count = a.data.size // max(out.size, 1)

    def bw(g):
        return (np.array(_expand_reduced(g / count, shape, axis), order="C"),)

    return make_result(out, (a,), bw, "mean")


def cumsum(a: Tensor, axis: int = -1, exclusive: bool = False) -> Tensor:
    x = a.data
    out = np.cumsum(x, axis=axis)
    if exclusive:
        out = out - x

    def bw(g):
        rev = np.flip(np.cumsum(np.flip(g, axis), axis=axis), axis)
        if exclusive:
            rev = rev - g
        return (np.ascontiguousarray(rev),)

    return make_result(out, (a,), bw, "cumsum")


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {src} into {shape}") from exc
    return make_result(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    """Explicit broadcast; size-1 (or missing leading) axes are repeated."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.array(np.broadcast_to(a.data, shape), order="C")
    except ValueError as exc:
        raise ShapeError(f"broadcast_to: cannot broadcast {src} to {shape}") from exc
    lead = len(shape) - len(src)

    def bw(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return make_result(out, (a,), bw, "broadcast_to")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shape mismatch {ref} vs {t.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)) for i in range(len(tensors))
        )

    return make_result(out, tuple(tensors), bw, "concat")


def slice(a: Tensor, idx) -> Tensor:  # noqa: A001
    """Basic (non-fancy) indexing."""
    out = np.array(a.data[idx], order="C")
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[idx] = g
        return (full,)

    return make_result(out, (a,), bw, "slice")


def gather_rows(a: Tensor, index: np.ndarray) -> Tensor:
    """``a[index]`` along axis 0 with an integer index array; backward scatter-adds."""
    index = np.asarray(index)
    out = a.data[index]
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index.reshape(-1), g.reshape((-1,) + shape[1:]))
        return (full,)

    return make_result(out, (a,), bw, "gather_rows")


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    return make_result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape (N, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: incompatible shapes {x.shape} and weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is None:
        return make_result(out, (x, weight), lambda g: (g @ wd, g.T @ xd), "linear")
    out += bias.data
    return make_result(out, (x, weight, bias), lambda g: (g @ wd, g.T @ xd, g.sum(0)), "linear")


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    n, c = xp.shape[:2]
    win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, k, k) -> (N*Ho*Wo, C*k*k)
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int | None = None) -> Tensor:
    """2-D cross-correlation, NCHW input, weight (Cout, Cin, k, k), zero padding."""
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv2d: unsupported stride {stride}")
    cout, cin, k, _ = weight.shape
    p = k // 2 if padding is None else padding
    n, _, h, w = x.shape
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: input {x.shape} too small for kernel {k}")
    wm = weight.data.reshape(cout, cin * k * k)

    if k == 1 and stride == 1 and p == 0:
        cols = x.data.transpose(0, 2, 3, 1).reshape(-1, cin)
    else:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
        cols = _im2col(xp, k, stride, ho, wo)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(weight.shape)
        gcols = gm @ wm
        if k == 1 and stride == 1 and p == 0:
            gx = np.ascontiguousarray(gcols.reshape(n, ho, wo, cin).transpose(0, 3, 1, 2))
        else:
            gc = gcols.reshape(n, ho, wo, cin, k, k)
            gxp = np.zeros((n, cin, h + 2 * p, w + 2 * p), dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += gc[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
            gx = np.ascontiguousarray(gxp[:, :, p : p + h, p : p + w]) if p else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, bw, "conv2d")


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x upsampling of an NCHW tensor."""
    if x.ndim != 4:
        raise ShapeError(f"upsample2x: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    return make_result(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),), "upsample2x")


def group_norm(x: Tensor, groups: int, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    if x.ndim != 4 or x.shape[1] % groups:
        raise ShapeError(f"group_norm: {x.shape} not divisible into {groups} groups")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm: affine shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    xc = xg - mu
    var = (xc * xc).mean(axis=2, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).reshape(n, c, h, w)
    gd = gamma.data.reshape(1, c, 1, 1)
    out = xhat * gd + beta.data.reshape(1, c, 1, 1)

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = (g * gd).reshape(n, groups, -1)
        xh = xhat.reshape(n, groups, -1)
        gx = inv * (gxhat - gxhat.mean(axis=2, keepdims=True) - xh * (gxhat * xh).mean(axis=2, keepdims=True))
        return gx.reshape(n, c, h, w), ggamma, gbeta

    return make_result(out.astype(x.dtype, copy=False), (x, gamma, beta), bw, "group_norm")


# ---------------------------------------------------------------- helpers built from primitives


def channel_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a per-sample, per-channel vector of shape (N, C) to an NCHW tensor."""
    n, c, h, w = x.shape
    if bias.shape != (n, c):
        raise ShapeError(f"channel_bias: bias {bias.shape} does not match features {x.shape}")
    return add(x, broadcast_to(reshape(bias, (n, c, 1, 1)), x.shape))


def mse(a: Tensor, b) -> Tensor:
    d = sub(a, b)
    return mean(square(d))


def l1(a: Tensor, b) -> Tensor:
    return mean(abs(sub(a, b)))
