"""Differentiable network operations on NCHW tensors."""
from __future__ import annotations

from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ShapeError
from .tensor import Tensor, bias_add, make_result


def _out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _conv_dense(xp, w, stride, ho, wo):
    kh, kw = w.shape[2:]
    if kh == 1 and kw == 1 and stride == 1:
        n, c, h, wd = xp.shape
        out = np.matmul(w[:, :, 0, 0], xp.reshape(n, c, h * wd))
        return out.reshape(n, w.shape[0], h, wd), None
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2), win


def _conv_dense_backward(g, xp, win, w, stride):
    o, c, kh, kw = w.shape
    n, _, hp, wp = xp.shape
    ho, wo = g.shape[2:]
    if win is None:
        g2 = g.reshape(n, o, ho * wo)
        x2 = xp.reshape(n, c, hp * wp)
        gw = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(o, c, 1, 1)
        gx = np.matmul(w[:, :, 0, 0].T, g2).reshape(n, c, hp, wp)
        return gx, gw
    gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))
    cols = np.tensordot(g, w, axes=([1], [0]))  # (n, ho, wo, c, kh, kw)
    gx = np.zeros_like(xp)
    for i in range(kh):
        for j in range(kw):
            gx[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += (
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            )
    return gx, gw


def _conv_depthwise(xp, w, stride, ho, wo):
    kh, kw = w.shape[2:]
    out = np.zeros((xp.shape[0], xp.shape[1], ho, wo))
    for i in range(kh):
        for j in range(kw):
            patch = xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]
            out += patch * w[:, 0, i, j][None, :, None, None]
    return out


def _conv_depthwise_backward(g, xp, w, stride):
    kh, kw = w.shape[2:]
    ho, wo = g.shape[2:]
    gx = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None),
                  slice(i, i + stride * (ho - 1) + 1, stride),
                  slice(j, j + stride * (wo - 1) + 1, stride))
            gw[:, 0, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
            gx[sl] += g * w[:, 0, i, j][None, :, None, None]
    return gx, gw


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0, groups: int = 1) -> Tensor:
    """2-D cross-correlation with zero padding.

    ``weight`` has shape (C_out, C_in // groups, kh, kw). Output spatial size
    is ``(H + 2p - k) // s + 1``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input and OIHW weight, got {x.shape}, {weight.shape}")
    n, c, h, w_ = x.shape
    o, cg, kh, kw = weight.shape
    if groups < 1 or c % groups or o % groups or cg != c // groups:
        raise ShapeError(f"conv2d: input channels {c}, weight {weight.shape}, groups {groups}")
    ho = _out_size(h, kh, stride, padding)
    wo = _out_size(w_, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w_}")

    xp = _pad(x.data, padding)
    wd = weight.data
    depthwise = groups == c and o == c and groups > 1
    if depthwise:
        out = _conv_depthwise(xp, wd, stride, ho, wo)
        cache = None
    elif groups == 1:
        out, cache = _conv_dense(xp, wd, stride, ho, wo)
    else:
        og = o // groups
        parts, cache = [], []
        for gi in range(groups):
            part, win = _conv_dense(xp[:, gi * cg:(gi + 1) * cg], wd[gi * og:(gi + 1) * og], stride, ho, wo)
            parts.append(part)
            cache.append(win)
        out = np.concatenate(parts, axis=1)
    out = np.ascontiguousarray(out)

    def backward(g):
        if depthwise:
            gxp, gw = _conv_depthwise_backward(g, xp, wd, stride)
        elif groups == 1:
            gxp, gw = _conv_dense_backward(g, xp, cache, wd, stride)
        else:
            og = o // groups
            gxp = np.zeros_like(xp)
            gw = np.zeros_like(wd)
            for gi in range(groups):
                gx_part, gw_part = _conv_dense_backward(
                    g[:, gi * og:(gi + 1) * og], xp[:, gi * cg:(gi + 1) * cg], cache[gi],
                    wd[gi * og:(gi + 1) * og], stride)
                gxp[:, gi * cg:(gi + 1) * cg] = gx_part
                gw[gi * og:(gi + 1) * og] = gw_part
        if padding:
            gxp = gxp[:, :, padding:padding + h, padding:padding + w_]
        return np.ascontiguousarray(gxp), gw

    result = make_result(out, (x, weight), backward, "conv2d")
    if bias is not None:
        result = bias_add(result, bias)
    return result


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange (N, C*r*r, H, W) into (N, C, H*r, W*r)."""
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"pixel_shuffle: {c} channels not divisible by {r * r}")
    co = c // (r * r)
    out = x.data.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r)

    def backward(g):
        return (g.reshape(n, co, h, r, w, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c, h, w),)

    return make_result(out, (x,), backward, "pixel_shuffle")


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Inverse of :func:`pixel_shuffle`."""
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"pixel_unshuffle: spatial {h}x{w} not divisible by {r}")
    ho, wo = h // r, w // r
    out = x.data.reshape(n, c, ho, r, wo, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, ho, wo)

    def backward(g):
        return (g.reshape(n, c, r, r, ho, wo).transpose(0, 1, 4, 2, 5, 3).reshape(n, c, h, w),)

    return make_result(out, (x,), backward, "pixel_unshuffle")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Normalize over the channel axis at every spatial position."""
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} for {c} channels")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    view = (1, c) + (1,) * (x.ndim - 2)
    gd = gamma.data.reshape(view)
    out = xhat * gd + beta.data.reshape(view)
    sum_axes = (0,) + tuple(range(2, x.ndim))

    def backward(g):
        g_gamma = (g * xhat).sum(axis=sum_axes)
        g_beta = g.sum(axis=sum_axes)
        gx_hat = g * gd
        gx = inv * (gx_hat - gx_hat.mean(axis=1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=1, keepdims=True))
        return gx, g_gamma, g_beta

    return make_result(out, (x, gamma, beta), backward, "layer_norm")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` for 2-D ``x`` of shape (M, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    result = make_result(out, (x, weight), lambda g: (g @ wd, g.T @ xd), "linear")
    if bias is not None:
        result = bias_add(result, bias)
    return result


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling with stride 2; odd sides are edge-padded first."""
    n, c, h, w = x.shape
    ph, pw = h % 2, w % 2
    xd = np.pad(x.data, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge") if (ph or pw) else x.data
    hh, ww = xd.shape[2] // 2, xd.shape[3] // 2
    out = xd.reshape(n, c, hh, 2, ww, 2).mean(axis=(3, 5))

    def backward(g):
        full = np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3)
        gx = full[:, :, :h, :w].copy()
        if ph:
            gx[:, :, h - 1, :] += full[:, :, h, :w]
        if pw:
            gx[:, :, :, w - 1] += full[:, :, :h, w]
        if ph and pw:
            gx[:, :, h - 1, w - 1] += full[:, :, h, w]
        return (gx,)

    return make_result(out, (x,), backward, "avg_pool2")
