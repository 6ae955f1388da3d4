"""Per-latent and per-image bitstreams built from rANS plus the bypass channel.

Symbols are scanned channel-major, then row, then column. A latent symbol
``n`` is coded with the discretized Gaussian of its element's scale; the two
edge symbols ``+-bound`` stand for every value at or beyond the edge and are
followed, in the bypass section, by the overflow magnitude.
"""
from __future__ import annotations

from typing import Tuple

import numpy as np

from .errors import ContractError, CorruptionError
from .probability import build_cdf_table, pixel_cdf_table
from .rans import BitReader, BitWriter, RansDecoder, encode_ranges, read_escape, write_escape

CHUNK = 8192


def _gather(cdf: np.ndarray, index: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    rows = np.arange(cdf.shape[0])
    starts = cdf[rows, index]
    return starts, cdf[rows, index + 1] - starts


def encode_latent_stream(symbols: np.ndarray, sigma: np.ndarray) -> bytes:
    """Code integer offsets ``symbols`` given the per-element prior scale."""
    symbols = np.asarray(symbols, dtype=np.int64).ravel()
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    if symbols.shape != sigma.shape:
        raise ContractError(f"{symbols.size} symbols for {sigma.size} scales")
    starts, freqs = [], []
    writer = BitWriter()
    for lo in range(0, symbols.size, CHUNK):
        n = symbols[lo:lo + CHUNK]
        bounds, cdf = build_cdf_table(sigma[lo:lo + CHUNK])
        index = np.clip(n + bounds, 0, 2 * bounds)
        s, f = _gather(cdf, index)
        starts.extend(s.tolist())
        freqs.extend(f.tolist())
        for i in np.nonzero(np.abs(n) >= bounds)[0]:
            write_escape(writer, int(abs(n[i]) - bounds[i]))
    return encode_ranges(starts, freqs) + writer.getvalue()


def decode_latent_stream(payload: bytes, sigma: np.ndarray) -> np.ndarray:
    """Inverse of :func:`encode_latent_stream`; returns int64 symbols."""
    sigma = np.asarray(sigma, dtype=np.float64).ravel()
    dec = RansDecoder(payload)
    out = np.empty(sigma.size, dtype=np.int64)
    edges = []
    for lo in range(0, sigma.size, CHUNK):
        bounds, cdf = build_cdf_table(sigma[lo:lo + CHUNK])
        for i, (bound, row) in enumerate(zip(bounds.tolist(), cdf)):
            cf = dec.peek()
            index = int(np.searchsorted(row, cf, side="right")) - 1
            start = int(row[index])
            dec.advance(start, int(row[index + 1]) - start)
            n = index - bound
            out[lo + i] = n
            if index == 0 or index == 2 * bound:
                edges.append(lo + i)
    used = dec.finish()
    reader = BitReader(payload[used:])
    for pos in edges:
        extra = read_escape(reader)
        out[pos] += extra if out[pos] > 0 else -extra
    reader.finish()
    return out


def encode_pixel_stream(values: np.ndarray, mean: np.ndarray, scale: np.ndarray) -> bytes:
    """Code 8-bit values under per-value discretized Gaussians (pixel units)."""
    values = np.asarray(values, dtype=np.int64).ravel()
    if values.min(initial=0) < 0 or values.max(initial=0) > 255:
        raise ContractError("pixel values must lie in 0..255")
    mean = np.asarray(mean, dtype=np.float64).ravel()
    scale = np.asarray(scale, dtype=np.float64).ravel()
    starts, freqs = [], []
    for lo in range(0, values.size, CHUNK):
        cdf = pixel_cdf_table(mean[lo:lo + CHUNK], scale[lo:lo + CHUNK])
        s, f = _gather(cdf, values[lo:lo + CHUNK])
        starts.extend(s.tolist())
        freqs.extend(f.tolist())
    return encode_ranges(starts, freqs)


def decode_pixel_stream(payload: bytes, mean: np.ndarray, scale: np.ndarray) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64).ravel()
    scale = np.asarray(scale, dtype=np.float64).ravel()
    dec = RansDecoder(payload)
    out = np.empty(mean.size, dtype=np.int64)
    for lo in range(0, mean.size, CHUNK):
        cdf = pixel_cdf_table(mean[lo:lo + CHUNK], scale[lo:lo + CHUNK])
        for i, row in enumerate(cdf):
            cf = dec.peek()
            index = int(np.searchsorted(row, cf, side="right")) - 1
            start = int(row[index])
            dec.advance(start, int(row[index + 1]) - start)
            out[lo + i] = index
    used = dec.finish()
    if used != len(payload):
        raise CorruptionError(f"{len(payload) - used} trailing bytes in pixel stream")
    return out
