"""Image files as ``uint8`` arrays of shape (H, W, 3).

Binary PPM (P6, maxval 255) is handled here without dependencies; PNG goes
through Pillow when it is installed.
"""
from __future__ import annotations

import os
import re

import numpy as np

from .errors import FormatError
from .fileutil import atomic_write_bytes

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def read_ppm_bytes(data: bytes) -> np.ndarray:
    if not data.startswith(b"P6"):
        raise FormatError("only binary PPM (P6) is supported")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        if not m:
            raise FormatError("truncated PPM header")
        fields.append(m.group(1))
        pos = m.end()
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as exc:
        raise FormatError(f"bad PPM header: {exc}") from exc
    if maxval != 255:
        raise FormatError(f"PPM maxval {maxval} unsupported (need 255)")
    if width <= 0 or height <= 0:
        raise FormatError("PPM has a zero dimension")
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise FormatError("missing whitespace after PPM header")
    pos += 1
    need = width * height * 3
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise FormatError(f"PPM raster has {len(raster)} bytes, expected {need}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(height, width, 3).copy()


def write_ppm_bytes(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"expected uint8 (H, W, 3) image, got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(img).tobytes()


def read_image(path) -> np.ndarray:
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if data.startswith(b"P6"):
        return read_ppm_bytes(data)
    if data.startswith(b"\x89PNG"):
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover - Pillow is optional
            raise FormatError("PNG support needs Pillow") from exc
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()
    raise FormatError(f"{path}: unrecognized image format")


def write_image(path, img: np.ndarray) -> None:
    path = os.fspath(path)
    if path.lower().endswith(".png"):
        from io import BytesIO

        from PIL import Image

        buf = BytesIO()
        Image.fromarray(np.asarray(img, dtype=np.uint8)).save(buf, format="PNG")
        atomic_write_bytes(path, buf.getvalue())
    else:
        atomic_write_bytes(path, write_ppm_bytes(img))


def to_float(img: np.ndarray) -> np.ndarray:
    """uint8 (H, W, 3) to float64 (1, 3, H, W) in [0, 1]."""
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3:
        raise FormatError(f"expected uint8 (H, W, C) image, got {img.dtype} {img.shape}")
    return img.transpose(2, 0, 1)[None].astype(np.float64) / 255.0


def to_uint8(x: np.ndarray) -> np.ndarray:
    """float (1, C, H, W) to uint8 (H, W, C): clamp to [0, 1], round half to even."""
    return np.rint(np.clip(x[0], 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0).copy()
