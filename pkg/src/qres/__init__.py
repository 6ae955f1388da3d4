"""Hierarchical VAE image codec with quantization-aware latents and rANS coding."""
from .codec import (
    compress,
    compress_lossless,
    decompress,
    decompress_lossless,
    interpolate_latents,
    progressive_decode,
    sample_unconditional,
)
from .container import CodedImage
from .model import ModelConfig, QResVAE

__version__ = "0.1.0"

__all__ = [
    "CodedImage",
    "ModelConfig",
    "QResVAE",
    "compress",
    "compress_lossless",
    "decompress",
    "decompress_lossless",
    "interpolate_latents",
    "progressive_decode",
    "sample_unconditional",
]
