"""Differentiable tensor operations.

Every op computes its forward result with numpy and, when a tape is
active, records a closure that maps the output gradient to input
gradients. Convolution uses the cross-correlation convention with zero
padding. Inputs in float32 accumulate in float32.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

from . import parallel
from .tensor import Tensor, emit

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# --------------------------------------------------------------------------
# elementwise arithmetic and shape plumbing
# --------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def backward(g, needs):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return emit(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    def backward(g, needs):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return emit(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    def backward(g, needs):
        ga = _unbroadcast(g * b.data, a.shape) if needs[0] else None
        gb = _unbroadcast(g * a.data, b.shape) if needs[1] else None
        return ga, gb

    return emit(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return emit(x.data * c, (x,), lambda g, needs: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Plain 2-D matrix product."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g, needs):
        ga = g @ b.data.T if needs[0] else None
        gb = a.data.T @ g if needs[1] else None
        return ga, gb

    return emit(a.data @ b.data, (a, b), backward, "matmul")


def sum_all(x: Tensor) -> Tensor:
    return emit(
        np.asarray(x.data.sum(), dtype=x.dtype),
        (x,),
        lambda g, needs: (np.broadcast_to(g, x.shape).copy(),),
        "sum",
    )


def mean_all(x: Tensor) -> Tensor:
    n = x.data.size
    return emit(
        np.asarray(x.data.mean(), dtype=x.dtype),
        (x,),
        lambda g, needs: (np.broadcast_to(g / n, x.shape).astype(x.dtype),),
        "mean",
    )


def sum_rows(x: Tensor) -> Tensor:
    """Sum over the last axis."""
    return emit(
        x.data.sum(axis=-1),
        (x,),
        lambda g, needs: (np.broadcast_to(g[..., None], x.shape).copy(),),
        "sum_rows",
    )


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return emit(
        x.data.reshape(shape),
        (x,),
        lambda g, needs: (g.reshape(x.shape),),
        "reshape",
    )


def permute(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return emit(
        np.ascontiguousarray(x.data.transpose(axes)),
        (x,),
        lambda g, needs: (np.ascontiguousarray(g.transpose(inverse)),),
        "permute",
    )


# --------------------------------------------------------------------------
# convolution
# --------------------------------------------------------------------------

def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _windows(xp: np.ndarray, kh: int, kw: int, s: int, ho: int, wo: int) -> np.ndarray:
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, : s * (ho - 1) + 1 : s, : s * (wo - 1) + 1 : s]


def _dense_forward(xp, w, s, ho, wo):
    cols = _windows(xp, w.shape[2], w.shape[3], s, ho, wo)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2)


def _dense_backward(xp, w, g, s, ho, wo, need_x, need_w):
    kh, kw = w.shape[2], w.shape[3]
    gw = gxp = None
    if need_w:
        cols = _windows(xp, kh, kw, s, ho, wo)
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
    if need_x:
        gcols = np.tensordot(g, w, axes=([1], [0]))  # N, Ho, Wo, Cin, kh, kw
        gxp = np.zeros_like(xp)
        for u in range(kh):
            for v in range(kw):
                gxp[:, :, u : u + s * (ho - 1) + 1 : s, v : v + s * (wo - 1) + 1 : s] += (
                    gcols[..., u, v].transpose(0, 3, 1, 2)
                )
    return gxp, gw


def _depthwise_forward(xp, w, s, ho, wo):
    kh, kw = w.shape[2], w.shape[3]
    out = np.zeros(xp.shape[:2] + (ho, wo), dtype=np.result_type(xp, w))
    for u in range(kh):
        for v in range(kw):
            out += (
                xp[:, :, u : u + s * (ho - 1) + 1 : s, v : v + s * (wo - 1) + 1 : s]
                * w[:, 0, u, v][:, None, None]
            )
    return out


def _depthwise_backward(xp, w, g, s, ho, wo, need_x, need_w):
    kh, kw = w.shape[2], w.shape[3]
    gxp = np.zeros_like(xp) if need_x else None
    gw = np.zeros_like(w) if need_w else None
    for u in range(kh):
        for v in range(kw):
            win = (slice(None), slice(None), slice(u, u + s * (ho - 1) + 1, s), slice(v, v + s * (wo - 1) + 1, s))
            if need_w:
                gw[:, 0, u, v] = np.einsum("nchw,nchw->c", g, xp[win])
            if need_x:
                gxp[win] += g * w[:, 0, u, v][:, None, None]
    return gxp, gw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation of an N x Cin x H x W batch.

    ``weight`` has shape Cout x (Cin / groups) x kh x kw. The depthwise case
    (groups == Cin == Cout) takes a dedicated shifted-accumulate path.
    """
    if x.ndim != 4:
        raise ValueError(f"conv2d: input must be N x C x H x W, got shape {x.shape}")
    if weight.ndim != 4:
        raise ValueError(f"conv2d: weight must be Cout x Cin/groups x kh x kw, got shape {weight.shape}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ValueError(f"conv2d: need stride >= 1, padding >= 0, groups >= 1 (got {stride}, {padding}, {groups})")
    n, cin, h, w_ = x.shape
    cout, cpg, kh, kw = weight.shape
    if cin % groups:
        raise ValueError(f"conv2d: input channels {cin} not divisible by groups={groups}")
    if cout % groups:
        raise ValueError(f"conv2d: output channels {cout} not divisible by groups={groups}")
    if cpg != cin // groups:
        raise ValueError(
            f"conv2d: weight dim 1 is {cpg} but input channels / groups = {cin}/{groups} = {cin // groups}"
        )
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} does not match output channels {cout}")
    ho = _out_extent(h, kh, stride, padding)
    wo = _out_extent(w_, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w_ + 2 * padding}"
        )

    p, s = padding, stride
    xpad = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    wd = weight.data
    depthwise = groups == cin and cpg == 1 and cout == cin
    cog = cout // groups

    def fwd(sl):
        xp = xpad[sl]
        if depthwise:
            return _depthwise_forward(xp, wd, s, ho, wo)
        if groups == 1:
            return _dense_forward(xp, wd, s, ho, wo)
        return np.concatenate(
            [
                _dense_forward(xp[:, gi * cpg : (gi + 1) * cpg], wd[gi * cog : (gi + 1) * cog], s, ho, wo)
                for gi in range(groups)
            ],
            axis=1,
        )

    out = np.concatenate(parallel.map_chunks(fwd, n), axis=0)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g, needs):
        need_x, need_w = needs[0], needs[1]

        def bwd(sl):
            xp, gs = xpad[sl], g[sl]
            if depthwise:
                return _depthwise_backward(xp, wd, gs, s, ho, wo, need_x, need_w)
            if groups == 1:
                return _dense_backward(xp, wd, gs, s, ho, wo, need_x, need_w)
            gx_parts, gw_parts = [], []
            for gi in range(groups):
                gxp_i, gw_i = _dense_backward(
                    xp[:, gi * cpg : (gi + 1) * cpg],
                    wd[gi * cog : (gi + 1) * cog],
                    gs[:, gi * cog : (gi + 1) * cog],
                    s, ho, wo, need_x, need_w,
                )
                gx_parts.append(gxp_i)
                gw_parts.append(gw_i)
            return (
                np.concatenate(gx_parts, axis=1) if need_x else None,
                np.concatenate(gw_parts, axis=0) if need_w else None,
            )

        parts = parallel.map_chunks(bwd, n)
        gx = gw = None
        if need_x:
            gx = np.concatenate([pr[0] for pr in parts], axis=0)
            if p:
                gx = gx[:, :, p:-p, p:-p]
        if need_w:
            gw = parallel.ordered_sum([pr[1] for pr in parts])
        if bias is None:
            return gx, gw
        gb = g.sum(axis=(0, 2, 3)) if needs[2] else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return emit(out, inputs, backward, "conv2d")


# --------------------------------------------------------------------------
# dense layers and normalization
# --------------------------------------------------------------------------

def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """y = x W^T + b over the last axis of ``x``."""
    if weight.ndim != 2:
        raise ValueError(f"linear: weight must be Dout x Din, got shape {weight.shape}")
    dout, din = weight.shape
    if x.ndim < 1 or x.shape[-1] != din:
        raise ValueError(f"linear: input feature dim {x.shape[-1] if x.ndim else None} != weight Din {din}")
    if bias is not None and bias.shape != (dout,):
        raise ValueError(f"linear: bias shape {bias.shape} does not match Dout {dout}")

    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, din)
    rows = x2.shape[0]
    wd = weight.data
    out = np.concatenate(parallel.map_chunks(lambda sl: x2[sl] @ wd.T, rows), axis=0)
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (dout,))

    def backward(g, needs):
        g2 = g.reshape(-1, dout)
        gx = gw = gb = None
        if needs[0]:
            gx = np.concatenate(parallel.map_chunks(lambda sl: g2[sl] @ wd, rows), axis=0).reshape(x.shape)
        if needs[1]:
            gw = parallel.ordered_sum(parallel.map_chunks(lambda sl: g2[sl].T @ x2[sl], rows))
        if bias is not None and needs[2]:
            gb = g2.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return emit(out, inputs, backward, "linear")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the last axis with population variance, then apply gamma and beta."""
    if eps <= 0:
        raise ValueError(f"layer_norm: eps must be > 0, got {eps}")
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"layer_norm: channel count {c} does not match gamma {gamma.shape} / beta {beta.shape}"
        )
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def backward(g, needs):
        gx = gg = gb = None
        if needs[0]:
            gxhat = g * gamma.data
            gx = rstd * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(g.ndim - 1))
        if needs[1]:
            gg = (g * xhat).sum(axis=lead)
        if needs[2]:
            gb = g.sum(axis=lead)
        return gx, gg, gb

    return emit(out, (x, gamma, beta), backward, "layer_norm")


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return emit(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g, needs: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(xd))
    y = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return emit(y, (x,), lambda g, needs: (g * y * (1 - y),), "sigmoid")


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x) with Phi the standard normal CDF (erf form)."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd / xd.dtype.type(_SQRT2)))
    y = (xd * cdf).astype(x.dtype)

    def backward(g, needs):
        pdf = xd.dtype.type(_INV_SQRT_2PI) * np.exp(-0.5 * xd * xd)
        return (g * (cdf + xd * pdf),)

    return emit(y, (x,), backward, "gelu")


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = {"relu": relu, "gelu": gelu, "sigmoid": sigmoid}[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected relu, gelu or sigmoid") from None
    return fn(x)


# --------------------------------------------------------------------------
# pooling, fusion, regularization
# --------------------------------------------------------------------------

def _check_map(x: Tensor, op: str) -> tuple[int, int, int, int]:
    if x.ndim != 4:
        raise ValueError(f"{op}: expected N x C x H x W feature map, got shape {x.shape}")
    n, c, h, w = x.shape
    if h * w < 1:
        raise ValueError(f"{op}: empty spatial extent {h}x{w}")
    return n, c, h, w


def global_avg_pool(x: Tensor) -> Tensor:
    n, c, h, w = _check_map(x, "global_avg_pool")
    hw = h * w
    out = x.data.mean(axis=(2, 3))

    def backward(g, needs):
        return (np.broadcast_to((g / hw)[:, :, None, None], x.shape).astype(x.dtype),)

    return emit(out, (x,), backward, "global_avg_pool")


def global_max_pool(x: Tensor) -> Tensor:
    """Per-channel spatial max; the gradient goes to the first row-major argmax."""
    n, c, h, w = _check_map(x, "global_max_pool")
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)
    out = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]

    def backward(g, needs):
        gx = np.zeros_like(flat)
        np.put_along_axis(gx, idx[..., None], g[..., None], axis=2)
        return (gx.reshape(x.shape),)

    return emit(out, (x,), backward, "global_max_pool")


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling; H and W must be multiples of k."""
    n, c, h, w = _check_map(x, "max_pool2d")
    if h % k or w % k:
        raise ValueError(f"max_pool2d: spatial size {h}x{w} not divisible by {k}")
    ho, wo = h // k, w // k
    blocks = x.data.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, k * k)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g, needs):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(x.shape)
        return (np.ascontiguousarray(gx),)

    return emit(out, (x,), backward, "max_pool2d")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"concat_channels: expected N x C inputs, got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"concat_channels: batch sizes differ ({a.shape[0]} vs {b.shape[0]})")
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)
    return emit(out, (a, b), lambda g, needs: (g[:, :c1], g[:, c1:]), "concat_channels")


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity in eval mode or when p == 0."""
    if not 0 <= p < 1:
        raise ValueError(f"dropout probability must satisfy 0 <= p < 1, got {p}")
    if not training or p == 0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a seeded generator")
    keep = (rng.random(x.shape) >= p).astype(x.dtype) * x.dtype.type(1.0 / (1.0 - p))
    return emit(x.data * keep, (x,), lambda g, needs: (g * keep,), "dropout")
