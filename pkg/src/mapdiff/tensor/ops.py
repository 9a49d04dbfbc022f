"""Differentiable operations on :class:`~mapdiff.tensor.core.Tensor`.

Each op computes its forward value with numpy and registers a closure that
maps the output gradient to gradients for its inputs.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from .core import Tensor, as_tensor, make_result

LEAKY_SLOPE = 0.2
PADDING_MODES = ("zero", "replicate", "circular", "valid")


def broadcast_shape(a: Sequence[int], b: Sequence[int]) -> tuple:
    """Trailing-dimension broadcast of two shapes; raises ``ValueError`` on mismatch."""
    out = []
    for i in range(1, max(len(a), len(b)) + 1):
        da = a[-i] if i <= len(a) else 1
        db = b[-i] if i <= len(b) else 1
        if da != db and da != 1 and db != 1:
            raise ValueError(f"shapes {tuple(a)} and {tuple(b)} are not broadcast-compatible")
        out.append(max(da, db) if min(da, db) != 0 else 0)
    return tuple(reversed(out))


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (the adjoint of broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _binary(a, b):
    a, b = as_tensor(a), as_tensor(b)
    broadcast_shape(a.shape, b.shape)
    return a, b


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _binary(a, b)
    return make_result(
        a.data + b.data, "add", (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _binary(a, b)
    return make_result(
        a.data - b.data, "sub", (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _binary(a, b)
    return make_result(
        a.data * b.data, "mul", (a, b),
        lambda g: (unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _binary(a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, "div", (a, b), bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, "neg", (a,), lambda g: (-g,))


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    p = float(exponent)
    out = a.data ** p
    return make_result(out, "pow", (a,), lambda g: (g * p * a.data ** (p - 1.0),))


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_result(a.data * a.data, "square", (a,), lambda g: (2.0 * g * a.data,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, "exp", (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return make_result(out, "log", (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return make_result(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    return make_result(np.abs(a.data), "abs", (a,), lambda g: (g * np.sign(a.data),))


def leaky_relu(a, slope: float = LEAKY_SLOPE) -> Tensor:
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return make_result(a.data * scale, "leaky_relu", (a,), lambda g: (g * scale,))


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is passed only where the value was inside."""
    a = as_tensor(a)
    inside = (a.data >= lo) & (a.data <= hi)
    return make_result(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (np.where(inside, g, 0.0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_result(out, "sigmoid", (a,), lambda g: (g * out * (1.0 - out),))


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU."""
    a = as_tensor(a)
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    out = a.data * cdf

    def bw(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return make_result(out, "gelu", (a,), bw)


_UNARY = {
    "exp": exp, "sqrt": sqrt, "leaky_relu": leaky_relu, "gelu": gelu,
    "sigmoid": sigmoid, "neg": neg, "log": log, "abs": abs, "square": square,
}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(op: str, a, b=None) -> Tensor:
    """Dispatch a named elementwise op (binary ops need ``b``)."""
    if op in _BINARY:
        if b is None:
            raise ValueError(f"'{op}' needs two operands")
        return _BINARY[op](a, b)
    if op in _UNARY:
        if b is not None:
            raise ValueError(f"'{op}' takes one operand")
        return _UNARY[op](a)
    raise ValueError(f"unknown elementwise op '{op}'")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(a.shape))

    def bw(g):
        return (np.broadcast_to(g.reshape(kept), a.shape),)

    return make_result(out, "sum", (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return make_result(np.transpose(a.data, axes), "transpose", (a,),
                       lambda g: (np.transpose(g, inv),))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def bw(g):
        full = np.zeros(a.shape)
        if _is_basic_index(index):
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out), "getitem", (a,), bw)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, "concat", ts, bw)


def split(a, sections: int, axis: int = 0) -> list:
    """Split into ``sections`` equal parts along ``axis``."""
    a = as_tensor(a)
    n = a.shape[axis]
    if n % sections:
        raise ValueError(f"axis of length {n} not divisible into {sections} parts")
    step = n // sections
    idx = [slice(None)] * a.ndim
    parts = []
    for i in range(sections):
        idx[axis] = slice(i * step, (i + 1) * step)
        parts.append(getitem(a, tuple(idx)))
    return parts


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul operands need at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"inner extents differ: {a.shape} @ {b.shape}")
    broadcast_shape(a.shape[:-2], b.shape[:-2])
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result(out, "matmul", (a, b), bw)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, "softmax", (a,), bw)


# ---------------------------------------------------------------------------
# padding and convolution
# ---------------------------------------------------------------------------

def _pad_index(n: int, p: int, mode: str) -> np.ndarray:
    idx = np.arange(-p, n + p)
    if mode == "replicate":
        return np.clip(idx, 0, n - 1)
    return np.mod(idx, n)


def pad2d(x, pad: tuple, mode: str = "zero") -> Tensor:
    """Pad the last two axes by ``(ph, pw)`` on each side."""
    x = as_tensor(x)
    ph, pw = pad
    if mode == "valid" or (ph == 0 and pw == 0):
        return x
    h, w = x.shape[-2:]
    lead = [(0, 0)] * (x.ndim - 2)
    if mode == "zero":
        out = np.pad(x.data, lead + [(ph, ph), (pw, pw)])

        def bw(g):
            return (g[..., ph:ph + h, pw:pw + w],)

        return make_result(out, "pad2d", (x,), bw)
    if mode not in ("replicate", "circular"):
        raise ValueError(f"unknown padding mode '{mode}'")
    np_mode = "edge" if mode == "replicate" else "wrap"
    out = np.pad(x.data, lead + [(ph, ph), (pw, pw)], mode=np_mode)
    # one-hot selection matrices; the adjoint folds padded cells back
    sel_h = np.zeros((h + 2 * ph, h))
    sel_h[np.arange(h + 2 * ph), _pad_index(h, ph, mode)] = 1.0
    sel_w = np.zeros((w + 2 * pw, w))
    sel_w[np.arange(w + 2 * pw), _pad_index(w, pw, mode)] = 1.0

    def bw(g):
        return (np.matmul(np.matmul(sel_h.T, g), sel_w),)

    return make_result(out, "pad2d", (x,), bw)


def _out_extent(n: int, k: int, s: int) -> int:
    return (n - k) // s + 1


def _conv_valid(xp: np.ndarray, w: np.ndarray, stride: int, groups: int) -> np.ndarray:
    b, c, h, wd = xp.shape
    o, cg, kh, kw = w.shape
    oh, ow = _out_extent(h, kh, stride), _out_extent(wd, kw, stride)
    if groups == 1 and kh == kw == 1 and stride == 1:
        return np.ascontiguousarray(np.tensordot(w[:, :, 0, 0], xp, axes=([1], [1])).transpose(1, 0, 2, 3))
    if groups == 1:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # b,oh,ow,o
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if groups == c and cg == 1 and o == c:
        out = np.zeros((b, c, oh, ow))
        for i in range(kh):
            for j in range(kw):
                sl = xp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
                out += sl * w[:, 0, i, j][None, :, None, None]
        return out
    og = o // groups
    xr = xp.reshape(b, groups, cg, h, wd)
    win = sliding_window_view(xr, (kh, kw), axis=(3, 4))[:, :, :, ::stride, ::stride]
    wr = w.reshape(groups, og, cg, kh, kw)
    out = np.einsum("bgcyxij,gocij->bgoyx", win, wr, optimize=True)
    return out.reshape(b, o, oh, ow)


def _conv_input_grad(g: np.ndarray, w: np.ndarray, stride: int, groups: int,
                     in_shape: tuple) -> np.ndarray:
    """Adjoint of :func:`_conv_valid` with respect to its input."""
    b, c, h, wd = in_shape
    o, cg, kh, kw = w.shape
    oh, ow = g.shape[-2:]
    if groups == 1 and kh == kw == 1 and stride == 1 and (oh, ow) == (h, wd):
        return np.ascontiguousarray(np.tensordot(w[:, :, 0, 0], g, axes=([0], [1])).transpose(1, 0, 2, 3))
    gx = np.zeros(in_shape)
    if groups == 1:
        cols = np.tensordot(g, w, axes=([1], [0]))  # b,oh,ow,c,kh,kw
        cols = cols.transpose(0, 3, 1, 2, 4, 5)
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * (oh - 1) + 1:stride,
                   j:j + stride * (ow - 1) + 1:stride] += cols[..., i, j]
        return gx
    if groups == c and cg == 1 and o == c:
        for i in range(kh):
            for j in range(kw):
                gx[:, :, i:i + stride * (oh - 1) + 1:stride,
                   j:j + stride * (ow - 1) + 1:stride] += g * w[:, 0, i, j][None, :, None, None]
        return gx
    og = o // groups
    gr = g.reshape(b, groups, og, oh, ow)
    wr = w.reshape(groups, og, cg, kh, kw)
    cols = np.einsum("bgoyx,gocij->bgcyxij", gr, wr, optimize=True)
    gxr = gx.reshape(b, groups, cg, h, wd)
    for i in range(kh):
        for j in range(kw):
            gxr[..., i:i + stride * (oh - 1) + 1:stride,
                j:j + stride * (ow - 1) + 1:stride] += cols[..., i, j]
    return gx


def _conv_weight_grad(xp: np.ndarray, g: np.ndarray, stride: int, groups: int,
                      w_shape: tuple) -> np.ndarray:
    b, c, h, wd = xp.shape
    o, cg, kh, kw = w_shape
    oh, ow = g.shape[-2:]
    if groups == 1 and kh == kw == 1 and stride == 1 and (oh, ow) == (h, wd):
        return np.tensordot(g, xp, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
    if groups == 1:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        win = win[:, :, :oh, :ow]
        return np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # o,c,kh,kw
    if groups == c and cg == 1 and o == c:
        gw = np.zeros(w_shape)
        for i in range(kh):
            for j in range(kw):
                sl = xp[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride]
                gw[:, 0, i, j] = (g * sl).sum(axis=(0, 2, 3))
        return gw
    og = o // groups
    xr = xp.reshape(b, groups, cg, h, wd)
    win = sliding_window_view(xr, (kh, kw), axis=(3, 4))[:, :, :, ::stride, ::stride]
    win = win[:, :, :, :oh, :ow]
    gr = g.reshape(b, groups, og, oh, ow)
    gw = np.einsum("bgoyx,bgcyxij->gocij", gr, win, optimize=True)
    return gw.reshape(w_shape)


def _check_conv(x: Tensor, w: Tensor, groups: int) -> None:
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError("conv2d expects x[b,c,h,w] and w[o,c/groups,kh,kw]")
    c = x.shape[1]
    o, cg = w.shape[:2]
    if groups < 1 or c % groups or o % groups:
        raise ValueError(f"channels {c}->{o} not divisible by groups={groups}")
    if cg * groups != c:
        raise ValueError(f"weight expects {cg * groups} input channels, got {c}")


def conv2d(x, w, bias=None, stride: int = 1, padding: str = "zero", groups: int = 1) -> Tensor:
    """2-D cross-correlation over ``x[b,c,h,w]`` with ``w[o,c/groups,kh,kw]``.

    Same-size padding modes (``zero``, ``replicate``, ``circular``) pad by
    ``k // 2`` and require odd kernel extents; ``valid`` pads nothing.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check_conv(x, w, groups)
    if padding not in PADDING_MODES:
        raise ValueError(f"unknown padding mode '{padding}'")
    kh, kw = w.shape[-2:]
    if padding != "valid":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("same-size padding needs odd kernel extents")
        x = pad2d(x, (kh // 2, kw // 2), padding)
    xp = x
    out = _conv_valid(xp.data, w.data, stride, groups)

    def bw(g):
        gx = _conv_input_grad(g, w.data, stride, groups, xp.shape) if xp.requires_grad else None
        gw = _conv_weight_grad(xp.data, g, stride, groups, w.shape) if w.requires_grad else None
        return gx, gw

    res = make_result(out, "conv2d", (xp, w), bw)
    if bias is not None:
        res = add(res, reshape(as_tensor(bias), (1, -1, 1, 1)))
    return res


def conv2d_adjoint(u, w, in_shape: tuple, stride: int = 1, groups: int = 1) -> np.ndarray:
    """Adjoint of valid (unpadded) ``conv2d`` w.r.t. its input, as a plain array."""
    u, w = as_tensor(u), as_tensor(w)
    return _conv_input_grad(u.data, w.data, stride, groups, tuple(in_shape))


def conv_transpose2d(x, w, bias=None, stride: int = 2, padding: int = 1,
                     output_padding: int = 1) -> Tensor:
    """Transposed convolution, ``w[c_in, c_out, kh, kw]``.

    Output extent is ``(n-1)*stride + k - 2*padding + output_padding``.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.shape[1] != w.shape[0]:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {w.shape[0]}")
    b, _, h, wd = x.shape
    cout, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    full_shape = (b, cout, (h - 1) * stride + kh + output_padding,
                  (wd - 1) * stride + kw + output_padding)
    full = _conv_input_grad(x.data, w.data, stride, 1, full_shape)
    oh = (h - 1) * stride + kh - 2 * padding + output_padding
    ow = (wd - 1) * stride + kw - 2 * padding + output_padding
    out = full[:, :, padding:padding + oh, padding:padding + ow]

    def bw(g):
        gfull = np.zeros(full_shape)
        gfull[:, :, padding:padding + oh, padding:padding + ow] = g
        gx = _conv_valid(gfull, w.data, stride, 1)[:, :, :h, :wd] if x.requires_grad else None
        gw = _conv_weight_grad(gfull, x.data, stride, 1, w.shape) if w.requires_grad else None
        return gx, gw

    res = make_result(np.ascontiguousarray(out), "conv_transpose2d", (x, w), bw)
    if bias is not None:
        res = add(res, reshape(as_tensor(bias), (1, -1, 1, 1)))
    return res


def l2_normalize(a, axis: int = -1, eps: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    norm = sqrt(sum(square(a), axis=axis, keepdims=True) + eps)
    return div(a, norm)


def check_finite(a: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(as_tensor(a).data)):
        raise FloatingPointError(f"non-finite values in {what}")
    return a


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def ones_like(a) -> Tensor:
    return Tensor(np.ones(as_tensor(a).shape))


def where(cond: np.ndarray, a, b) -> Optional[Tensor]:
    a, b = _binary(a, b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)
    return make_result(
        out, "where", (a, b),
        lambda g: (unbroadcast(np.where(cond, g, 0.0), a.shape),
                   unbroadcast(np.where(cond, 0.0, g), b.shape)),
    )
