"""Distortion and rate-distortion metrics.

Images are compared in the [0, 1] range. ``uint8`` inputs of shape
(H, W, C) are converted automatically; float inputs are taken as NCHW.
"""
from __future__ import annotations

from typing import Sequence, Tuple

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import ContractError, ShapeError
from .imageio import to_float
from .tensor import Tensor

PSNR_CAP = 99.0
MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
WINDOW = 11
WINDOW_SIGMA = 1.5
_C1 = 0.01 ** 2
_C2 = 0.03 ** 2


def _as_nchw(img) -> np.ndarray:
    arr = np.asarray(img)
    if arr.dtype == np.uint8:
        return to_float(arr)
    arr = arr.astype(np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    return arr


def psnr_from_mse(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP
    # adding 0.0 turns -0.0 (mse == 1) into 0.0
    return min(PSNR_CAP, float(-10.0 * np.log10(mse)) + 0.0)


def mse(x, y) -> float:
    a, b = _as_nchw(x), _as_nchw(y)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return float(np.mean((a - b) ** 2))


def psnr(x, y) -> float:
    """Peak signal-to-noise ratio in dB; identical images give ``PSNR_CAP``."""
    return psnr_from_mse(mse(x, y))


def gaussian_window(size: int = WINDOW, sigma: float = WINDOW_SIGMA) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def ms_ssim_scales(height: int, width: int, max_scales: int = len(MS_SSIM_WEIGHTS)) -> int:
    """Number of scales whose smallest side still fits the window."""
    side = min(height, width)
    m = 0
    while m < max_scales and side >= WINDOW:
        m += 1
        side = (side + 1) // 2
    return m


def _blur(x: Tensor, kv: Tensor, kh: Tensor) -> Tensor:
    return F.conv2d(F.conv2d(x, kv, groups=x.shape[1]), kh, groups=x.shape[1])


def _ssim_terms(x: Tensor, y: Tensor, kv: Tensor, kh: Tensor) -> Tuple[Tensor, Tensor]:
    """Per-image mean luminance*contrast*structure and contrast*structure."""
    mx, my = _blur(x, kv, kh), _blur(y, kv, kh)
    mx2, my2, mxy = T.square(mx), T.square(my), T.mul(mx, my)
    sxx = T.sub(_blur(T.square(x), kv, kh), mx2)
    syy = T.sub(_blur(T.square(y), kv, kh), my2)
    sxy = T.sub(_blur(T.mul(x, y), kv, kh), mxy)
    cs_map = T.div(T.add(T.mul(sxy, 2.0), _C2), T.add(T.add(sxx, syy), _C2))
    lum = T.div(T.add(T.mul(mxy, 2.0), _C1), T.add(T.add(mx2, my2), _C1))
    ssim = T.mean(T.mul(lum, cs_map), axis=(1, 2, 3))
    cs = T.mean(cs_map, axis=(1, 2, 3))
    return ssim, cs


def ms_ssim_tensor(x: Tensor, y: Tensor, max_scales: int = len(MS_SSIM_WEIGHTS)) -> Tuple[Tensor, int]:
    """Differentiable per-image MS-SSIM of NCHW tensors; returns ``(values (N,), scales used)``.

    Below the five-scale size the coarsest scales are dropped and the
    remaining weights renormalized to sum to one.
    """
    if x.shape != y.shape:
        raise ShapeError(f"image shapes differ: {x.shape} vs {y.shape}")
    n, c = x.shape[:2]
    m = ms_ssim_scales(*x.shape[2:], max_scales=max_scales)
    if m == 0:
        raise ContractError(f"images of {x.shape[2]}x{x.shape[3]} are smaller than the {WINDOW}px window")
    weights = np.asarray(MS_SSIM_WEIGHTS[:m])
    weights = weights / weights.sum()
    g = gaussian_window()
    kv = Tensor(np.tile(g.reshape(1, 1, WINDOW, 1), (c, 1, 1, 1)))
    kh = Tensor(np.tile(g.reshape(1, 1, 1, WINDOW), (c, 1, 1, 1)))
    out = None
    for j in range(m):
        ssim, cs = _ssim_terms(x, y, kv, kh)
        term = ssim if j == m - 1 else cs
        factor = T.power(T.clamp(term, lo=1e-8), float(weights[j]))
        out = factor if out is None else T.mul(out, factor)
        if j < m - 1:
            x, y = F.avg_pool2(x), F.avg_pool2(y)
    return out, m


def ms_ssim(x, y) -> float:
    """Mean over the batch of per-image MS-SSIM, for arrays or uint8 images."""
    a, b = _as_nchw(x), _as_nchw(y)
    with T.no_grad():
        values, _ = ms_ssim_tensor(Tensor._wrap(a), Tensor._wrap(b))
    return float(np.mean(values.data))


# -- BD-rate --------------------------------------------------------------------

def _curve(points) -> Tuple[np.ndarray, np.ndarray]:
    rates, quality = [], []
    for p in points:
        if hasattr(p, "bpp_actual"):
            rates.append(p.bpp_actual)
            quality.append(p.psnr)
        else:
            r, q = p
            rates.append(r)
            quality.append(q)
    rates = np.asarray(rates, dtype=np.float64)
    quality = np.asarray(quality, dtype=np.float64)
    if rates.size < 4:
        raise ContractError(f"BD-rate needs at least 4 points per curve, got {rates.size}")
    if np.any(rates <= 0):
        raise ContractError("BD-rate needs strictly positive rates")
    return rates, quality


def bd_rate(curve_a: Sequence, curve_b: Sequence, degree: int = 3) -> float:
    """Average rate difference of ``curve_b`` relative to ``curve_a`` in percent.

    Each curve is a sequence of ``(rate, psnr)`` pairs or objects with
    ``bpp_actual`` and ``psnr``. Log-rate is fit as a cubic in PSNR and both
    fits are integrated over the shared PSNR interval.
    """
    ra, qa = _curve(curve_a)
    rb, qb = _curve(curve_b)
    lo = max(qa.min(), qb.min())
    hi = min(qa.max(), qb.max())
    if not hi > lo:
        raise ContractError(f"PSNR ranges do not overlap: [{qa.min()}, {qa.max()}] vs [{qb.min()}, {qb.max()}]")
    pa = np.polyint(np.polyfit(qa, np.log(ra), degree))
    pb = np.polyint(np.polyfit(qb, np.log(rb), degree))
    avg_a = (np.polyval(pa, hi) - np.polyval(pa, lo)) / (hi - lo)
    avg_b = (np.polyval(pb, hi) - np.polyval(pb, lo)) / (hi - lo)
    return float((np.exp(avg_b - avg_a) - 1.0) * 100.0)


def per_image_mean(values: Sequence[float]) -> float:
    """Average of per-image metric values (never pooled over pixels)."""
    values = list(values)
    if not values:
        raise ContractError("no values to average")
    return float(np.mean(values))

