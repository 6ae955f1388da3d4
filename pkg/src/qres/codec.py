"""User-facing coding operations on ``uint8`` (H, W, 3) images."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .container import MODE_LOSSLESS, MODE_LOSSY, CodedImage
from .errors import ContractError, FormatError
from .imageio import to_float, to_uint8
from .model import LatentCode, QResVAE, crop, pad_replicate
from .streams import decode_pixel_stream, encode_pixel_stream
from .tensor import Tensor, no_grad


def resolve_threads(requested: Optional[int] = None) -> int:
    """Worker count: the request, capped by ``QRES_THREADS`` when set."""
    n = requested if requested else os.cpu_count() or 1
    cap = os.environ.get("QRES_THREADS")
    if cap:
        try:
            n = min(n, max(1, int(cap)))
        except ValueError as exc:
            raise ContractError(f"QRES_THREADS must be an integer, got {cap!r}") from exc
    return max(1, n)


def _encode_all(codes: Sequence[LatentCode], threads: Optional[int]) -> List[bytes]:
    workers = resolve_threads(threads)
    if workers == 1 or len(codes) < 2:
        return [c.to_bytes() for c in codes]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(LatentCode.to_bytes, codes))


@dataclass
class EncodeResult:
    coded: CodedImage
    reconstruction: np.ndarray
    codes: List[LatentCode] = field(default_factory=list)

    @property
    def pixels(self) -> int:
        return self.coded.pixels

    def estimated_bits(self) -> float:
        return sum(c.estimated_bits() for c in self.codes)

    def bpp_estimated(self) -> float:
        return self.estimated_bits() / self.pixels

    def bpp_actual(self) -> float:
        return self.coded.bpp()


def _padded_input(img: np.ndarray, model: QResVAE) -> Tuple[Tensor, Tuple[int, int]]:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != model.config.image_channels or img.dtype != np.uint8:
        raise ContractError(f"expected uint8 (H, W, {model.config.image_channels}) image, got {img.shape}")
    x, size = pad_replicate(to_float(img), model.config.max_downsample)
    return Tensor._wrap(x), size


def _encode_latents(model: QResVAE, x: Tensor):
    features = model.bottom_up(x)
    state = model.initial_state(1, *x.shape[2:])
    codes = []
    for i, block in enumerate(model.blocks):
        state = model.enter_block(i, state)
        state, code = block.compress(state, features[i])
        codes.append(code)
    return state, codes


def _check_model(coded: CodedImage, model: QResVAE, mode: int, extra_streams: int) -> None:
    if coded.model_id != model.model_id():
        raise FormatError(f"container made by model {coded.model_id:#04x}, "
                          f"this model is {model.model_id():#04x}")
    if coded.mode != mode:
        raise FormatError(f"container mode {coded.mode} cannot be decoded here (want {mode})")
    want = model.config.num_blocks + extra_streams
    if coded.num_streams != want:
        raise FormatError(f"container has {coded.num_streams} streams, model needs {want}")


def compress_with_stats(img: np.ndarray, model: QResVAE, *, lambda_code: int = 0,
                        threads: Optional[int] = None) -> EncodeResult:
    """Pad, run the bottom-up path, code every latent block and pack the streams."""
    x, (h, w) = _padded_input(img, model)
    with no_grad():
        state, codes = _encode_latents(model, x)
        x_hat = model.reconstruct(state).data
    coded = CodedImage(width=w, height=h, model_id=model.model_id(), lambda_code=lambda_code,
                       mode=MODE_LOSSY, streams=_encode_all(codes, threads))
    return EncodeResult(coded, to_uint8(crop(x_hat, (h, w))), codes)


def compress(img: np.ndarray, model: QResVAE, *, lambda_code: int = 0,
             threads: Optional[int] = None) -> CodedImage:
    return compress_with_stats(img, model, lambda_code=lambda_code, threads=threads).coded


def _decode_states(coded: CodedImage, model: QResVAE, k: int, t: float,
                   rng: Optional[np.random.Generator]) -> Tensor:
    m = model.config.max_downsample
    ph = coded.height + (-coded.height) % m
    pw = coded.width + (-coded.width) % m
    state = model.initial_state(1, ph, pw)
    for i, block in enumerate(model.blocks):
        state = model.enter_block(i, state)
        if i < k:
            state = block.decompress(state, coded.streams[i])
        else:
            state = block.sample(state, t, rng)
    return state


def decompress(coded: CodedImage, model: QResVAE) -> np.ndarray:
    _check_model(coded, model, MODE_LOSSY, 0)
    with no_grad():
        state = _decode_states(coded, model, model.config.num_blocks, 0.0, None)
        x_hat = model.reconstruct(state).data
    return to_uint8(crop(x_hat, (coded.height, coded.width)))


def progressive_decode(coded: CodedImage, k: int, model: QResVAE, t: float = 0.0,
                       rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Decode the first ``k`` streams and sample the remaining blocks at temperature ``t``."""
    n = model.config.num_blocks
    if not 0 <= k <= n:
        raise ContractError(f"k={k} outside 0..{n}")
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"temperature must lie in [0, 1], got {t}")
    _check_model(coded, model, MODE_LOSSY, 0)
    if rng is None:
        rng = np.random.default_rng(0)
    with no_grad():
        state = _decode_states(coded, model, k, t, rng)
        x_hat = model.reconstruct(state).data
    return to_uint8(crop(x_hat, (coded.height, coded.width)))


# -- lossless mode ------------------------------------------------------------

def _pixel_layout(mean: Tensor, scale: Tensor, size):
    return crop(mean.data, size)[0], crop(scale.data, size)[0]


def compress_lossless(img: np.ndarray, model: QResVAE, *, threads: Optional[int] = None) -> CodedImage:
    """Latent streams as in lossy mode plus one pixel stream (channel-major raster)."""
    if model.lossless_head is None:
        raise ContractError("lossless coding needs a model with a lossless head")
    x, (h, w) = _padded_input(img, model)
    with no_grad():
        state, codes = _encode_latents(model, x)
        mean, scale = _pixel_layout(*model.pixel_params(state), (h, w))
    values = np.asarray(img).transpose(2, 0, 1)
    streams = _encode_all(codes, threads) + [encode_pixel_stream(values, mean, scale)]
    return CodedImage(width=w, height=h, model_id=model.model_id(), lambda_code=0,
                      mode=MODE_LOSSLESS, streams=streams)


def decompress_lossless(coded: CodedImage, model: QResVAE) -> np.ndarray:
    if model.lossless_head is None:
        raise ContractError("lossless decoding needs a model with a lossless head")
    _check_model(coded, model, MODE_LOSSLESS, 1)
    n = model.config.num_blocks
    with no_grad():
        state = _decode_states(coded, model, n, 0.0, None)
        mean, scale = _pixel_layout(*model.pixel_params(state), (coded.height, coded.width))
    values = decode_pixel_stream(coded.streams[n], mean, scale)
    c = model.config.image_channels
    return values.reshape(c, coded.height, coded.width).transpose(1, 2, 0).astype(np.uint8)


def decode_any(coded: CodedImage, model: QResVAE) -> np.ndarray:
    if coded.mode == MODE_LOSSLESS:
        return decompress_lossless(coded, model)
    return decompress(coded, model)


# -- latent-space operations --------------------------------------------------

def _posterior_mean_decode(model: QResVAE, xs: Sequence[Tensor], weights: Sequence[float]) -> np.ndarray:
    pairs = [(x, w) for x, w in zip(xs, weights) if w != 0.0]
    feats = [model.bottom_up(x) for x, _ in pairs]
    state = model.initial_state(1, *xs[0].shape[2:])
    for i, block in enumerate(model.blocks):
        state = model.enter_block(i, state)
        state = block.posterior_mean_step(state, [f[i] for f in feats], [w for _, w in pairs])
    return model.reconstruct(state).data


def reconstruct_posterior_mean(img: np.ndarray, model: QResVAE) -> np.ndarray:
    """Decode the image from its unquantized posterior means (no noise, no rounding)."""
    x, size = _padded_input(img, model)
    with no_grad():
        x_hat = _posterior_mean_decode(model, [x], [1.0])
    return to_uint8(crop(x_hat, size))


def interpolate_latents(img_a: np.ndarray, img_b: np.ndarray, alpha: float, model: QResVAE) -> np.ndarray:
    """Decode ``(1 - alpha) * mu_a + alpha * mu_b`` block by block along one shared trajectory."""
    if np.shape(img_a) != np.shape(img_b):
        raise ContractError(f"image sizes differ: {np.shape(img_a)} vs {np.shape(img_b)}")
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must lie in [0, 1], got {alpha}")
    xa, size = _padded_input(img_a, model)
    xb, _ = _padded_input(img_b, model)
    with no_grad():
        x_hat = _posterior_mean_decode(model, [xa, xb], [1.0 - alpha, alpha])
    return to_uint8(crop(x_hat, size))


def sample_unconditional(model: QResVAE, t: float, rng: np.random.Generator,
                         height: Optional[int] = None, width: Optional[int] = None) -> np.ndarray:
    """Draw every latent from the prior at temperature ``t``."""
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"temperature must lie in [0, 1], got {t}")
    m = model.config.max_downsample
    height = height or m
    width = width or m
    ph, pw = height + (-height) % m, width + (-width) % m
    with no_grad():
        state = model.initial_state(1, ph, pw)
        for i, block in enumerate(model.blocks):
            state = model.enter_block(i, state)
            state = block.sample(state, t, rng)
        x_hat = model.reconstruct(state).data
    return to_uint8(crop(x_hat, (height, width)))
