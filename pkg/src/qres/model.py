"""Hierarchical VAE with quantization-aware latent blocks.

The bottom-up path turns a padded image into one feature map per latent
scale. The top-down path starts from a learnable constant (tiled to the
coarsest grid) and runs the latent blocks in order ``z_1 .. z_N`` from the
coarsest to the finest scale; a sub-pixel convolution maps the final state
back to pixels.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint
from . import tensor as T
from .errors import ContractError, FormatError
from .nn import Conv2d, ConvNeXtBlock, Module, Upsample
from .probability import (
    SIGMA_MAX,
    SIGMA_MIN,
    PosteriorStats,
    PriorStats,
    posterior_sample_train,
    prior_logpdf,
    prior_sample,
    residual_round,
    symbol_bits,
)
from .streams import decode_latent_stream, encode_latent_stream
from .tensor import Tensor

CONFIG_KEY = "__config__"
ROLE_KEY = "__role__"


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``block_scales[i]`` is the downsampling factor of latent ``z_{i+1}``
    relative to the input; it must be non-increasing. ``stage_widths`` gives
    the feature width of each distinct scale, coarsest first.
    """

    block_scales: Tuple[int, ...] = (16, 8, 4, 2)
    z_channels: Tuple[int, ...] = (16, 8, 8, 4)
    stage_widths: Tuple[int, ...] = (64, 48, 48, 32)
    encoder_depth: int = 1
    kernel_size: int = 3
    mlp_ratio: int = 2
    image_channels: int = 3
    lossless: bool = False
    name: str = "small"
    lambdas: Tuple[float, ...] = ()

    def __post_init__(self):
        self.block_scales = tuple(int(s) for s in self.block_scales)
        self.z_channels = tuple(int(c) for c in self.z_channels)
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.lambdas = tuple(float(v) for v in self.lambdas)
        self.validate()

    @property
    def num_blocks(self) -> int:
        return len(self.block_scales)

    @property
    def stages(self) -> Tuple[int, ...]:
        return tuple(sorted(set(self.block_scales), reverse=True))

    @property
    def max_downsample(self) -> int:
        return self.block_scales[0]

    @property
    def finest(self) -> int:
        return self.block_scales[-1]

    def width_at(self, scale: int) -> int:
        return self.stage_widths[self.stages.index(scale)]

    def validate(self) -> None:
        scales = self.block_scales
        if not scales:
            raise ContractError("model needs at least one latent block")
        if len(self.z_channels) != len(scales):
            raise ContractError("z_channels must list one entry per latent block")
        if any(a < b for a, b in zip(scales, scales[1:])):
            raise ContractError(f"block scales must be non-increasing, got {scales}")
        if any(s < 1 for s in scales) or any(c < 0 for c in self.z_channels):
            raise ContractError("scales must be positive and channel counts non-negative")
        stages = self.stages
        if len(self.stage_widths) != len(stages):
            raise ContractError(f"{len(stages)} distinct scales need as many stage widths")
        if any(a % b for a, b in zip(stages, stages[1:])):
            raise ContractError(f"consecutive scales must divide each other: {stages}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        data = json.loads(text)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise FormatError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def small(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def tiny(cls, **overrides) -> "ModelConfig":
        base = dict(block_scales=(4, 2), z_channels=(2, 2), stage_widths=(6, 4), name="tiny")
        base.update(overrides)
        return cls(**base)

    @classmethod
    def large(cls, **overrides) -> "ModelConfig":
        """Twelve latent blocks from 64x down to 4x down, with desk-scale widths."""
        base = dict(
            block_scales=(64, 32, 32, 16, 16, 16, 8, 8, 8, 4, 4, 4),
            z_channels=(16, 16, 16, 8, 8, 8, 8, 8, 8, 4, 4, 4),
            stage_widths=(64, 64, 48, 32, 24),
            name="large",
        )
        base.update(overrides)
        return cls(**base)


class LatentBlock(Module):
    """One latent variable group folded into the top-down state.

    ``prior`` sees only the state; ``posterior`` sees the state concatenated
    with the bottom-up feature of the same scale.
    """

    def __init__(self, width: int, z_channels: int, rng: np.random.Generator,
                 kernel: int = 3, mlp_ratio: int = 2):
        self.z_channels = z_channels
        self.front = ConvNeXtBlock(width, rng, kernel, mlp_ratio)
        self.end = ConvNeXtBlock(width, rng, kernel, mlp_ratio)
        if z_channels:
            self.post_in = Conv2d(2 * width, width, 1, rng)
            self.post_mid = ConvNeXtBlock(width, rng, kernel, mlp_ratio)
            self.post_out = Conv2d(width, z_channels, 1, rng, gain=0.5)
            self.prior_in = Conv2d(width, width, 1, rng)
            self.prior_out = Conv2d(width, 2 * z_channels, 1, rng, gain=0.1)
            self.prior_out.bias.data[z_channels:] = np.log(np.expm1(1.0 - SIGMA_MIN))
            self.z_proj = Conv2d(z_channels, width, 1, rng)

    # -- branches -------------------------------------------------------------
    def prior(self, state: Tensor) -> Tuple[Tensor, Optional[PriorStats]]:
        """Return the pre-processed state and the prior it implies."""
        h = self.front(state)
        if not self.z_channels:
            return h, None
        raw = self.prior_out(T.gelu(self.prior_in(h)))
        mu_hat = T.channels(raw, 0, self.z_channels)
        sigma = T.add(T.softplus(T.channels(raw, self.z_channels, 2 * self.z_channels)), SIGMA_MIN)
        sigma = T.clamp(sigma, hi=SIGMA_MAX)
        return h, PriorStats(mu_hat, sigma)

    def posterior(self, h: Tensor, feature: Tensor) -> PosteriorStats:
        y = self.post_in(T.concat_channels([h, feature]))
        return PosteriorStats(self.post_out(self.post_mid(y)))

    def update(self, h: Tensor, z: Optional[Tensor]) -> Tensor:
        if self.z_channels:
            h = T.add(h, self.z_proj(z))
        return self.end(h)

    # -- execution modes ------------------------------------------------------
    def train_step(self, state: Tensor, feature: Tensor, rng: np.random.Generator):
        """Noisy posterior sample; returns the new state and per-image rate in nats."""
        h, prior = self.prior(state)
        if prior is None:
            return self.update(h, None), None
        post = self.posterior(h, feature)
        z = posterior_sample_train(post, rng)
        rate = T.mul(T.tsum(prior_logpdf(z, prior), axis=(1, 2, 3)), -1.0)
        return self.update(h, z), rate

    def compress(self, state: Tensor, feature: Tensor):
        """Residual-round the posterior mean; returns the new state and the code."""
        h, prior = self.prior(state)
        if prior is None:
            return self.update(h, None), LatentCode.empty()
        mu = self.posterior(h, feature).mu.data
        z, n = residual_round(mu, prior.mu_hat.data)
        code = LatentCode(symbols=n, sigma=prior.sigma_hat.data.copy())
        return self.update(h, Tensor._wrap(z)), code

    def decompress(self, state: Tensor, payload: bytes) -> Tensor:
        h, prior = self.prior(state)
        if prior is None:
            decode_latent_stream(payload, np.zeros(0))
            return self.update(h, None)
        n = decode_latent_stream(payload, prior.sigma_hat.data).reshape(prior.mu_hat.shape)
        return self.update(h, Tensor._wrap(prior.mu_hat.data + n))

    def sample(self, state: Tensor, t: float, rng: np.random.Generator) -> Tensor:
        h, prior = self.prior(state)
        if prior is None:
            return self.update(h, None)
        return self.update(h, prior_sample(prior, t, rng))

    def posterior_mean_step(self, state: Tensor, features: Sequence[Tensor],
                            weights: Sequence[float]) -> Tensor:
        """Inject a weighted mix of posterior means (no noise, no rounding)."""
        h, prior = self.prior(state)
        if prior is None:
            return self.update(h, None)
        z = None
        for feat, w in zip(features, weights):
            mu = self.posterior(h, feat).mu.data * w
            z = mu if z is None else z + mu
        return self.update(h, Tensor._wrap(z))


@dataclass
class LatentCode:
    """Integer symbols of one latent block together with their prior scales."""

    symbols: np.ndarray
    sigma: np.ndarray

    @classmethod
    def empty(cls) -> "LatentCode":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0))

    def to_bytes(self) -> bytes:
        return encode_latent_stream(self.symbols, self.sigma)

    def estimated_bits(self) -> float:
        return symbol_bits(self.symbols.ravel(), self.sigma.ravel())


class EncoderStage(Module):
    def __init__(self, cin: int, cout: int, factor: int, depth: int, rng, kernel: int, mlp_ratio: int):
        self.down = Conv2d(cin, cout, factor, rng, stride=factor)
        self.blocks = [ConvNeXtBlock(cout, rng, kernel, mlp_ratio) for _ in range(depth)]

    def __call__(self, x: Tensor) -> Tensor:
        x = self.down(x)
        for block in self.blocks:
            x = block(x)
        return x


class QResVAE(Module):
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        # "ema" or "raw" for checkpoints written by the trainer
        self.role: Optional[str] = None
        rng = np.random.default_rng(seed)
        stages = config.stages
        fine_to_coarse = stages[::-1]
        k, r = config.kernel_size, config.mlp_ratio

        self.encoder = []
        cin, prev = config.image_channels, 1
        for scale in fine_to_coarse:
            width = config.width_at(scale)
            self.encoder.append(EncoderStage(cin, width, scale // prev, config.encoder_depth, rng, k, r))
            cin, prev = width, scale

        self.constant = Tensor(rng.normal(0.0, 1.0, size=(1, config.width_at(stages[0]), 1, 1)),
                               requires_grad=True)
        self.upsamplers = [
            Upsample(config.width_at(a), config.width_at(b), a // b, rng)
            for a, b in zip(stages, stages[1:])
        ]
        self.blocks = [
            LatentBlock(config.width_at(s), c, rng, k, r)
            for s, c in zip(config.block_scales, config.z_channels)
        ]
        fine_width = config.width_at(config.finest)
        self.output = Upsample(fine_width, config.image_channels, config.finest, rng)
        self.output.conv.weight.data *= 0.1
        self.output.conv.bias.data[:] = 0.5
        self.lossless_head = None
        if config.lossless:
            self.lossless_head = Upsample(fine_width, 2 * config.image_channels, config.finest, rng)
            self._init_lossless_head()

    def _init_lossless_head(self) -> None:
        head = self.lossless_head
        head.conv.weight.data *= 0.1
        r2 = self.config.finest ** 2
        c = self.config.image_channels
        head.conv.bias.data[: c * r2] = 0.5
        head.conv.bias.data[c * r2:] = np.log(np.expm1(20.0))

    # -- geometry -------------------------------------------------------------
    def check_input(self, height: int, width: int) -> None:
        m = self.config.max_downsample
        if height % m or width % m or height == 0 or width == 0:
            raise ContractError(f"input {height}x{width} is not divisible by {m}; pad first")

    def bottom_up(self, x: Tensor) -> List[Tensor]:
        """One feature map per latent block (blocks sharing a scale share a map)."""
        self.check_input(*x.shape[2:])
        by_scale: Dict[int, Tensor] = {}
        h = x
        for scale, stage in zip(self.config.stages[::-1], self.encoder):
            h = stage(h)
            by_scale[scale] = h
        return [by_scale[s] for s in self.config.block_scales]

    def initial_state(self, batch: int, height: int, width: int) -> Tensor:
        self.check_input(height, width)
        m = self.config.max_downsample
        return T.tile_spatial(self.constant, batch, height // m, width // m)

    def enter_block(self, i: int, state: Tensor) -> Tensor:
        """Upsample the state when block ``i`` lives on a finer scale than block ``i-1``."""
        scales = self.config.block_scales
        if i > 0 and scales[i] != scales[i - 1]:
            stage = self.config.stages.index(scales[i])
            state = self.upsamplers[stage - 1](state)
        return state

    def reconstruct(self, state: Tensor) -> Tensor:
        return self.output(state)

    def pixel_params(self, state: Tensor) -> Tuple[Tensor, Tensor]:
        """Per-pixel mean and scale (in 8-bit units) of the lossless likelihood."""
        if self.lossless_head is None:
            raise ContractError("model has no lossless head")
        raw = self.lossless_head(state)
        c = self.config.image_channels
        mean = T.mul(T.channels(raw, 0, c), 255.0)
        scale = T.clamp(T.add(T.softplus(T.channels(raw, c, 2 * c)), SIGMA_MIN), hi=SIGMA_MAX)
        return mean, scale

    # -- training forward -----------------------------------------------------
    def forward_train(self, x: Tensor, rng: np.random.Generator):
        """Returns ``(final_state, per-block rate tensors of shape (N,))``."""
        n, _, hh, ww = x.shape
        features = self.bottom_up(x)
        state = self.initial_state(n, hh, ww)
        rates = []
        for i, block in enumerate(self.blocks):
            state = self.enter_block(i, state)
            state, rate = block.train_step(state, features[i], rng)
            rates.append(rate)
        return state, rates

    # -- identity -------------------------------------------------------------
    def to_checkpoint(self) -> Dict[str, np.ndarray]:
        tensors = self.state_dict()
        raw = np.frombuffer(self.config.to_json().encode("utf-8"), dtype=np.uint8)
        tensors[CONFIG_KEY] = raw.astype(np.float64)
        if self.role:
            tensors[ROLE_KEY] = np.frombuffer(self.role.encode("utf-8"), dtype=np.uint8).astype(np.float64)
        return tensors

    def checkpoint_bytes(self) -> bytes:
        return checkpoint.dumps(self.to_checkpoint())

    def model_id(self) -> int:
        """First byte of the SHA-256 of the serialized checkpoint."""
        return hashlib.sha256(self.checkpoint_bytes()).digest()[0]

    def save(self, path) -> None:
        checkpoint.save(path, self.to_checkpoint())

    @classmethod
    def from_checkpoint(cls, tensors: Dict[str, np.ndarray]) -> "QResVAE":
        if CONFIG_KEY not in tensors:
            raise FormatError("checkpoint carries no model config")
        text = bytes(np.asarray(tensors[CONFIG_KEY], dtype=np.uint8)).decode("utf-8")
        model = cls(ModelConfig.from_json(text))
        if ROLE_KEY in tensors:
            model.role = bytes(np.asarray(tensors[ROLE_KEY], dtype=np.uint8)).decode("utf-8")
        params = {k: v for k, v in tensors.items() if k not in (CONFIG_KEY, ROLE_KEY)}
        extra = sorted(set(params) - set(dict(model.named_parameters())))
        if extra:
            raise FormatError(f"checkpoint has unknown parameters: {extra[:5]}")
        model.load_state_dict(params)
        return model

    @classmethod
    def load(cls, path) -> "QResVAE":
        return cls.from_checkpoint(checkpoint.load(path))

    def copy(self) -> "QResVAE":
        return QResVAE.from_checkpoint(self.to_checkpoint())

    def with_weights(self, weights: Dict[str, np.ndarray], role: Optional[str] = None) -> "QResVAE":
        """A copy of this model carrying ``weights`` (e.g. EMA shadows)."""
        model = QResVAE(self.config)
        model.load_state_dict(weights)
        model.role = role
        return model

    def with_lossless_head(self, seed: int = 0) -> "QResVAE":
        """A lossless-mode copy sharing these weights, with a fresh head."""
        cfg = ModelConfig(**{**asdict(self.config), "lossless": True})
        model = QResVAE(cfg, seed=seed)
        params = dict(model.named_parameters())
        for name, arr in self.state_dict().items():
            params[name].data = arr.copy()
        return model


def pad_replicate(x: np.ndarray, multiple: int) -> Tuple[np.ndarray, Tuple[int, int]]:
    """Edge-pad an NCHW array on the bottom/right to a multiple of ``multiple``."""
    h, w = x.shape[2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="edge")
    return x, (h, w)


def crop(x: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    h, w = size
    return x[:, :, :h, :w]
