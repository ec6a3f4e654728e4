"""Differentiable ops on :class:`~cto.engine.tensor.Tensor`.

Conventions:

* 4-D feature maps are laid out ``(N, C, H, W)``.
* ``conv2d`` is a cross-correlation (no kernel flip).
* ``upsample_bilinear`` follows the half-pixel (align-corners = false) rule.
* Broadcasting is limited to tensor-with-scalar and batched ``matmul``;
  anything else needs an explicit reshape or :func:`expand_channels`.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, _count, default_dtype, make_result

__all__ = [
    "add", "sub", "mul", "div", "neg", "scale", "add_scalar", "one_minus",
    "sigmoid", "relu", "log", "exp", "clip", "pointwise",
    "sum", "mean", "reshape", "permute",
    "matmul", "softmax_lastdim", "softmax_channels",
    "conv2d", "batch_norm", "max_pool2d", "upsample_bilinear",
    "concat_channels", "slice_channels", "expand_channels",
    "strided_subsample", "pad2d", "crop2d", "stack_groups",
]


def _is_scalar(b) -> bool:
    return isinstance(b, (int, float, np.floating, np.integer)) or (
        isinstance(b, np.ndarray) and b.ndim == 0
    )


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=default_dtype()))


# ---------------------------------------------------------------- elementwise

def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return add_scalar(a, float(b))
    b = _as_tensor(b)
    _check_same(a, b, "add")
    return make_result("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return add_scalar(a, -float(b))
    b = _as_tensor(b)
    _check_same(a, b, "sub")
    return make_result("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, float(b))
    b = _as_tensor(b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return make_result("mul", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, 1.0 / float(b))
    b = _as_tensor(b)
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return make_result("div", out, (a, b), lambda g: (g / bd, -g * out / bd))


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, k: float) -> Tensor:
    k = a.data.dtype.type(k)
    return make_result("scale", a.data * k, (a,), lambda g: (g * k,))


def add_scalar(a: Tensor, k: float) -> Tensor:
    k = a.data.dtype.type(k)
    return make_result("add_scalar", a.data + k, (a,), lambda g: (g,))


def one_minus(a: Tensor) -> Tensor:
    return make_result("one_minus", 1 - a.data, (a,), lambda g: (-g,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1 / (1 + e), e / (1 + e)).astype(x.dtype, copy=False)
    return make_result("sigmoid", out, (a,), lambda g: (g * out * (1 - out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result("relu", a.data * mask, (a,), lambda g: (g * mask,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return make_result("log", np.log(x), (a,), lambda g: (g / x,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    x = a.data
    mask = (x >= lo) & (x <= hi)
    return make_result("clip", np.clip(x, lo, hi), (a,), lambda g: (g * mask,))


_POINTWISE = {
    "sigmoid": lambda a, b: sigmoid(a),
    "relu": lambda a, b: relu(a),
    "one_minus": lambda a, b: one_minus(a),
    "add": add,
    "mul": mul,
    "scale": lambda a, b: scale(a, b),
}


def pointwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch an elementwise op by name."""
    try:
        fn = _POINTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown pointwise kind {kind!r}") from None
    if kind in ("add", "mul", "scale") and b is None:
        raise ValueError(f"{kind} needs a second operand")
    return fn(a, b)


# ----------------------------------------------------------------- reductions

def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=True)

    def bw(g):
        return (np.broadcast_to(g.reshape(out.shape), shape).copy(),)

    res = out.reshape(()) if axis is None else np.squeeze(out, axis=axis)
    return make_result("sum", res, (a,), bw)


def mean(a: Tensor, axis=None) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return scale(sum(a, axis), 1.0 / n)


# -------------------------------------------------------------------- layout

def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return make_result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return make_result(
        "permute", np.ascontiguousarray(a.data.transpose(axes)), (a,),
        lambda g: (g.transpose(inv),),
    )


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate ``(N, Ci, H, W)`` tensors along channels, in order."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat_channels needs at least one part")
    n, _, h, w = parts[0].shape
    for i, p in enumerate(parts):
        if p.ndim != 4 or (p.shape[0], p.shape[2], p.shape[3]) != (n, h, w):
            raise ShapeError(
                f"concat_channels: part {i} has shape {p.shape}, expected (N={n}, *, H={h}, W={w})"
            )
    if len(parts) == 1:
        return parts[0]
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return make_result("concat", np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw)


def slice_channels(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start < stop <= a.shape[1]:
        raise ShapeError(f"slice_channels: [{start}:{stop}] out of range for {a.shape[1]} channels")
    shape, dtype = a.shape, a.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g
        return (full,)

    return make_result("slice", a.data[:, start:stop].copy(), (a,), bw)


def expand_channels(a: Tensor, channels: int) -> Tensor:
    """Repeat a single-channel map ``(N, 1, H, W)`` across ``channels``."""
    if a.ndim != 4 or a.shape[1] != 1:
        raise ShapeError(f"expand_channels expects (N, 1, H, W), got {a.shape}")
    out = np.repeat(a.data, channels, axis=1)
    return make_result("expand", out, (a,), lambda g: (g.sum(axis=1, keepdims=True),))


def stack_groups(parts: Sequence[Tensor]) -> Tensor:
    """Stack equal-shape tensors on a new axis 1."""
    parts = list(parts)
    for p in parts[1:]:
        _check_same(parts[0], p, "stack_groups")
    out = np.stack([p.data for p in parts], axis=1)
    return make_result(
        "stack", out, tuple(parts), lambda g: tuple(g[:, i] for i in range(len(parts)))
    )


def strided_subsample(x: Tensor, s: int, offset_r: int, offset_c: int) -> Tensor:
    """Gather ``x[..., offset_r-1::s, offset_c-1::s]`` with 1-based offsets."""
    _, _, h, w = x.shape
    if h % s or w % s:
        raise ShapeError(f"strided_subsample: spatial dims {h}x{w} not divisible by stride {s}")
    if not (1 <= offset_r <= s and 1 <= offset_c <= s):
        raise ValueError(f"offsets must lie in [1, {s}], got ({offset_r}, {offset_c})")
    r0, c0 = offset_r - 1, offset_c - 1
    shape, dtype = x.shape, x.dtype

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, :, r0::s, c0::s] = g
        return (full,)

    return make_result("subsample", x.data[:, :, r0::s, c0::s].copy(), (x,), bw)


def _pad_index(n: int, before: int, after: int, mode: str) -> np.ndarray:
    np_mode = {"reflect": "reflect", "replicate": "edge"}[mode]
    return np.pad(np.arange(n), (before, after), mode=np_mode)


def pad2d(x: Tensor, pads, mode: str = "zeros") -> Tensor:
    """Pad H and W. ``pads`` is ``(top, bottom, left, right)``.

    ``mode`` is one of ``zeros``, ``reflect`` or ``replicate``; the latter two
    are gathers, so their backward scatters gradient onto the source pixels.
    """
    top, bottom, left, right = pads
    n, c, h, w = x.shape
    if mode == "zeros":
        out = np.pad(x.data, ((0, 0), (0, 0), (top, bottom), (left, right)))
        return make_result(
            "pad", out, (x,), lambda g: (g[:, :, top:top + h, left:left + w],)
        )
    if mode not in ("reflect", "replicate"):
        raise ValueError(f"unknown pad mode {mode!r}")
    ri = _pad_index(h, top, bottom, mode)
    ci = _pad_index(w, left, right, mode)
    out = x.data[:, :, ri[:, None], ci[None, :]]
    dtype = x.dtype

    def bw(g):
        # rows then columns: two 1-D scatter-adds
        tmp = np.zeros((n, c, h, g.shape[3]), dtype=dtype)
        np.add.at(tmp, (slice(None), slice(None), ri), g)
        full = np.zeros((n, c, h, w), dtype=dtype)
        np.add.at(full.transpose(3, 0, 1, 2), ci, tmp.transpose(3, 0, 1, 2))
        return (full,)

    return make_result("pad", out, (x,), bw)


def crop2d(x: Tensor, top: int, left: int, height: int, width: int) -> Tensor:
    shape, dtype = x.shape, x.dtype
    if top + height > shape[2] or left + width > shape[3]:
        raise ShapeError(f"crop2d window exceeds input {shape}")

    def bw(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, :, top:top + height, left:left + width] = g
        return (full,)

    out = x.data[:, :, top:top + height, left:left + width].copy()
    return make_result("crop", out, (x,), bw)


# ------------------------------------------------------------------- matmul

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``(..., m, k) @ (..., k, n)``.

    Leading dims must be equal or 1 (including missing dims).
    """
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ShapeError("matmul operands need at least two dims")
    if ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ ({ad.shape[-1]} vs {bd.shape[-2]})")
    lead_a, lead_b = ad.shape[:-2], bd.shape[:-2]
    nd = max(len(lead_a), len(lead_b))
    pa = (1,) * (nd - len(lead_a)) + lead_a
    pb = (1,) * (nd - len(lead_b)) + lead_b
    for da, db in zip(pa, pb):
        if da != db and da != 1 and db != 1:
            raise ShapeError(f"matmul: batch dims {lead_a} and {lead_b} not broadcastable")
    out = np.matmul(ad, bd)
    m, k, n = ad.shape[-2], ad.shape[-1], bd.shape[-1]
    _count(int(np.prod(out.shape[:-2], dtype=np.int64)) * m * k * n)

    def reduce_to(g, shape):
        extra = g.ndim - len(shape)
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, d in enumerate(shape[:-2]) if d == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return g

    def bw(g):
        ga = reduce_to(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        gb = reduce_to(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return make_result("matmul", out, (a, b), bw)


def softmax_lastdim(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return make_result("softmax", out, (x,), bw)


def softmax_channels(x: Tensor) -> Tensor:
    """Softmax over axis 1 of an ``(N, C, H, W)`` tensor."""
    return permute(softmax_lastdim(permute(x, (0, 2, 3, 1))), (0, 3, 1, 2))


# -------------------------------------------------------------- convolution

def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0:
        raise ShapeError(f"kernel {k} larger than padded input {size + 2 * padding}")
    return span // stride + 1


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation of ``(N, Cin, H, W)`` with ``(Cout, Cin/groups, kh, kw)``."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if cin % groups:
        raise ShapeError(f"conv2d: input channels {cin} not divisible by groups {groups}")
    if cout % groups:
        raise ShapeError(f"conv2d: output channels {cout} not divisible by groups {groups}")
    if cin_g * groups != cin:
        raise ShapeError(
            f"conv2d: kernel expects {cin_g * groups} input channels, input has {cin}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    _count(n * cout * cin_g * kh * kw * ho * wo)

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xd.shape[2], xd.shape[3]
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    wd = weight.data
    if groups == 1:
        out = np.tensordot(win, wd, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    else:
        cout_g = cout // groups
        wg = win.reshape(n, groups, cin_g, ho, wo, kh, kw)
        kg = wd.reshape(groups, cout_g, cin_g, kh, kw)
        out = np.einsum("ngchwij,gocij->ngohw", wg, kg, optimize=True).reshape(n, cout, ho, wo)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out)

    def bw(g):
        if groups == 1:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
            gcol = np.tensordot(g, wd, axes=([1], [0]))  # (n, ho, wo, cin, kh, kw)
        else:
            cout_g = cout // groups
            gg = g.reshape(n, groups, cout_g, ho, wo)
            gw = np.einsum("ngohw,ngchwij->gocij", gg, wg, optimize=True).reshape(wd.shape)
            gcol = np.einsum("ngohw,gocij->nhwgcij", gg, kg, optimize=True).reshape(
                n, ho, wo, cin, kh, kw
            )
        gxp = np.zeros((n, cin, hp, wp), dtype=xd.dtype)
        gcol = gcol.transpose(0, 3, 4, 5, 1, 2)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcol[:, :, i, j]
        gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return make_result("conv2d", out, inputs, bw)


def max_pool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 1) -> Tensor:
    n, c, h, w = x.shape
    ho = conv_output_size(h, kernel, stride, padding)
    wo = conv_output_size(w, kernel, stride, padding)
    xd = np.pad(
        x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)),
        constant_values=-np.inf,
    )
    win = sliding_window_view(xd, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    hp, wp, dtype = xd.shape[2], xd.shape[3], x.dtype

    def bw(g):
        gxp = np.zeros((n, c, hp, wp), dtype=dtype)
        for k in range(kernel * kernel):
            i, j = divmod(k, kernel)
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += g * (arg == k)
        return (gxp[:, :, padding:padding + h, padding:padding + w],)

    return make_result("max_pool2d", np.ascontiguousarray(out), (x,), bw)


# ---------------------------------------------------------- normalization

def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization.

    In training mode the batch statistics are used and the running buffers
    are updated in place (unbiased variance, like most frameworks). In eval
    mode the running buffers are read only.
    """
    n, c, h, w = x.shape
    xd = x.data
    g_ = gamma.data.reshape(1, c, 1, 1)
    b_ = beta.data.reshape(1, c, 1, 1)
    if training:
        m = n * h * w
        if m < 2:
            raise ValueError("batch_norm in train mode needs at least two values per channel")
        mu = xd.mean(axis=(0, 2, 3))
        var = xd.var(axis=(0, 2, 3))
        running_mean *= 1 - momentum
        running_mean += momentum * mu.astype(running_mean.dtype)
        running_var *= 1 - momentum
        running_var += momentum * (var * m / (m - 1)).astype(running_var.dtype)
    else:
        mu = running_mean.astype(xd.dtype)
        var = running_var.astype(xd.dtype)
    inv = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(1, c, 1, 1)) * inv.reshape(1, c, 1, 1)
    out = xhat * g_ + b_

    def bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gxhat = g * g_
        if training:
            mcount = n * h * w
            gx = (inv.reshape(1, c, 1, 1) / mcount) * (
                mcount * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * inv.reshape(1, c, 1, 1)
        return gx, ggamma, gbeta

    return make_result("batch_norm", out, (x, gamma, beta), bw)


# ------------------------------------------------------------- resampling

def _bilinear_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Row-stochastic ``(n_out, n_in)`` interpolation matrix, half-pixel rule."""
    mat = np.zeros((n_out, n_in), dtype=np.float64)
    ratio = n_in / n_out
    for o in range(n_out):
        src = max((o + 0.5) * ratio - 0.5, 0.0)
        i0 = min(int(math.floor(src)), n_in - 1)
        i1 = min(i0 + 1, n_in - 1)
        t = src - i0
        mat[o, i0] += 1 - t
        mat[o, i1] += t
    return mat.astype(dtype)


def upsample_bilinear(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Resize ``(N, C, H, W)`` to ``(N, C, out_h, out_w)``.

    Source coordinate of output pixel ``o`` is ``(o + 0.5) * in/out - 0.5``,
    clamped below at 0 (align-corners = false).
    """
    if out_h < 1 or out_w < 1:
        raise ValueError("output size must be positive")
    _, _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x
    ah = _bilinear_matrix(h, out_h, x.dtype)
    aw = _bilinear_matrix(w, out_w, x.dtype)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def bw(g):
        return (np.matmul(np.matmul(ah.T, g), aw),)

    return make_result("upsample", out, (x,), bw)
