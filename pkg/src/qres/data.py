"""Deterministic synthetic images standing in for natural-photo training sets.

Three families cover different statistics:

``noise``
    Gaussian-blurred white noise per channel (smooth texture).
``gradient``
    Linear colour ramps with a random direction (very smooth).
``blobs``
    Piecewise-constant ellipses on a flat background (sharp edges).

Every image is a pure function of ``(kind, size, index, seed)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import ContractError

KINDS = ("noise", "gradient", "blobs")
SMOOTH_KINDS = ("noise", "gradient")

Size = Union[int, Tuple[int, int]]


def _hw(size: Size) -> Tuple[int, int]:
    if isinstance(size, (int, np.integer)):
        return int(size), int(size)
    h, w = size
    return int(h), int(w)


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def blurred_noise(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    sigma = rng.uniform(1.0, 3.0)
    base = rng.uniform(0.2, 0.8, size=3)
    contrast = rng.uniform(0.1, 0.3)
    out = np.empty((h, w, 3))
    for c in range(3):
        field = gaussian_filter(rng.normal(size=(h, w)), sigma, mode="wrap")
        field /= field.std() + 1e-12
        out[..., c] = base[c] + contrast * field
    return out


def gradient(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    theta = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    scale = max(h, w, 2) - 1
    t = (np.cos(theta) * xx + np.sin(theta) * yy) / scale
    t = t - t.min()
    start = rng.uniform(0.0, 1.0, size=3)
    end = rng.uniform(0.0, 1.0, size=3)
    return start + t[..., None] * (end - start)


def blobs(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    out = np.empty((h, w, 3))
    out[:] = rng.uniform(0.0, 1.0, size=3)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ry = rng.uniform(0.15, 0.5) * h
        rx = rng.uniform(0.15, 0.5) * w
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        out[mask] = rng.uniform(0.0, 1.0, size=3)
    return out


_GENERATORS = {"noise": blurred_noise, "gradient": gradient, "blobs": blobs}


def generate(kind: str, size: Size, index: int, seed: int) -> np.ndarray:
    """One uint8 (H, W, 3) image."""
    if kind not in _GENERATORS:
        raise ContractError(f"unknown generator {kind!r}; choose from {KINDS}")
    h, w = _hw(size)
    if h < 1 or w < 1:
        raise ContractError(f"image size must be positive, got {h}x{w}")
    rng = np.random.default_rng([seed, KINDS.index(kind), index])
    return _to_uint8(_GENERATORS[kind](rng, h, w))


@dataclass(frozen=True)
class SyntheticDataset:
    """``count`` images of one family, or of all families in rotation when ``kind='mixed'``."""

    kind: str = "mixed"
    size: Size = 16
    count: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind != "mixed" and self.kind not in KINDS:
            raise ContractError(f"unknown generator {self.kind!r}")
        if self.count < 0:
            raise ContractError("count must be non-negative")

    def kind_of(self, index: int) -> str:
        return KINDS[index % len(KINDS)] if self.kind == "mixed" else self.kind

    def __len__(self) -> int:
        return self.count

    def __getitem__(self, index: int) -> np.ndarray:
        if not 0 <= index < self.count:
            raise IndexError(index)
        return generate(self.kind_of(index), self.size, index, self.seed)

    def __iter__(self) -> Iterator[np.ndarray]:
        for i in range(self.count):
            yield self[i]

    def images(self) -> List[np.ndarray]:
        return list(self)

    def batch(self, rng: np.random.Generator, batch_size: int, crop: Optional[int] = None,
              hflip: bool = False) -> np.ndarray:
        """Random float batch (N, 3, H, W) in [0, 1] with optional random crops and flips."""
        idx = rng.integers(0, self.count, size=batch_size)
        out = []
        for i in idx:
            img = self[int(i)]
            if crop is not None:
                h, w = img.shape[:2]
                if crop > min(h, w):
                    raise ContractError(f"crop {crop} exceeds image {h}x{w}")
                y0 = int(rng.integers(0, h - crop + 1))
                x0 = int(rng.integers(0, w - crop + 1))
                img = img[y0:y0 + crop, x0:x0 + crop]
            if hflip and rng.random() < 0.5:
                img = img[:, ::-1]
            out.append(img.transpose(2, 0, 1).astype(np.float64) / 255.0)
        return np.stack(out)
