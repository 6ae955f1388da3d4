"""Rate-distortion training, evaluation and reporting."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import metrics
from . import tensor as T
from .codec import compress_with_stats, resolve_threads
from .data import SyntheticDataset
from .errors import ContractError, FormatError, NonFiniteError, TrainingDivergence
from .fileutil import atomic_write_text
from .model import ModelConfig, QResVAE
from .probability import pixel_log_likelihood
from .rans import coded_bits
from .tensor import Tensor

log = logging.getLogger(__name__)

LN2 = float(np.log(2.0))
DISTORTIONS = ("mse", "ms-ssim")


@dataclass
class TrainConfig:
    """Optimization hyperparameters. ``lmbda`` is stored as ``lambda`` in JSON."""

    lmbda: float = 256.0
    learning_rate: float = 2e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 2.0
    ema_decay: float = 0.995
    batch_size: int = 8
    steps: int = 2000
    crop_size: Optional[int] = None
    hflip: bool = False
    distortion: str = "mse"
    seed: int = 0
    data_kind: str = "mixed"
    image_size: int = 16
    data_count: int = 256
    log_every: int = 10

    def validate(self) -> None:
        if not self.lmbda > 0:
            raise ContractError(f"lambda must be positive, got {self.lmbda}")
        if not 0.0 < self.ema_decay < 1.0:
            raise ContractError(f"ema_decay must lie in (0, 1), got {self.ema_decay}")
        if not self.grad_clip > 0:
            raise ContractError(f"grad_clip must be positive, got {self.grad_clip}")
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.batch_size < 1 or self.steps < 0:
            raise ContractError("batch_size must be >= 1 and steps >= 0")
        if self.distortion not in DISTORTIONS:
            raise ContractError(f"distortion must be one of {DISTORTIONS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lambda"] = d.pop("lmbda")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "lambda" in data:
            data["lmbda"] = data.pop("lambda")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise FormatError(f"unknown training config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "TrainConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                data = json.load(fh)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: {exc}") from exc
        return cls.from_dict(data)


# -- loss -----------------------------------------------------------------------

@dataclass
class LossTerms:
    total: Tensor
    rate: Tensor  # nats per pixel, batch mean
    distortion: Tensor  # batch mean
    block_rates: List[Optional[Tensor]] = field(default_factory=list)

    @property
    def rate_bpp(self) -> float:
        return self.rate.item() / LN2


def _distortion(x: Tensor, x_hat: Tensor, kind: str) -> Tensor:
    if kind == "mse":
        return T.mean(T.square(T.sub(x_hat, x)))
    values, _ = metrics.ms_ssim_tensor(x, x_hat)
    return T.sub(T.mul(T.mean(values), -1.0), -1.0)


def _rate_per_pixel(rates: Sequence[Optional[Tensor]], pixels: int) -> Tensor:
    per_image = None
    for r in rates:
        if r is not None:
            per_image = r if per_image is None else T.add(per_image, r)
    if per_image is None:
        return Tensor(np.zeros(()))
    return T.div(T.mean(per_image), float(pixels))


def loss(x: Tensor, model: QResVAE, lmbda: float, rng: np.random.Generator,
         distortion: str = "mse") -> LossTerms:
    """``rate + lmbda * distortion`` with the rate in nats per pixel."""
    _, _, h, w = x.shape
    state, rates = model.forward_train(x, rng)
    x_hat = model.reconstruct(state)
    rate = _rate_per_pixel(rates, h * w)
    dist = _distortion(x, x_hat, distortion)
    total = T.add(rate, T.mul(dist, float(lmbda)))
    return LossTerms(total, rate, dist, rates)


def lossless_loss(x_uint8: np.ndarray, model: QResVAE, rng: np.random.Generator) -> LossTerms:
    """Latent rate plus the pixel code length, both in nats per pixel."""
    x = Tensor._wrap(x_uint8.astype(np.float64) / 255.0)
    n, _, h, w = x.shape
    state, rates = model.forward_train(x, rng)
    mean, scale = model.pixel_params(state)
    ll = pixel_log_likelihood(Tensor._wrap(x_uint8.astype(np.float64)), mean, scale)
    pixel_rate = T.div(T.mul(T.tsum(ll), -1.0), float(n * h * w))
    rate = _rate_per_pixel(rates, h * w)
    return LossTerms(T.add(rate, pixel_rate), rate, pixel_rate, rates)


# -- optimizer pieces -----------------------------------------------------------

def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))


def clip_gradients(params: Sequence[Tensor], max_norm: float) -> float:
    """Rescale gradients in place to global norm ``max_norm`` if larger; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * scale
    return norm


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        adam_step(self)


def adam_step(opt: Adam) -> None:
    opt.t += 1
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** opt.t
    c2 = 1.0 - b2 ** opt.t
    for p, m, v in zip(opt.params, opt.m, opt.v):
        if p.grad is None:
            continue
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)


def ema_update(shadow: Dict[str, np.ndarray], model, decay: float) -> None:
    """``shadow = decay * shadow + (1 - decay) * w`` for every parameter."""
    for name, p in model.named_parameters():
        s = shadow[name]
        s *= decay
        s += (1.0 - decay) * p.data


# -- training loop --------------------------------------------------------------

@dataclass
class TrainResult:
    model: QResVAE  # EMA weights
    raw: QResVAE
    history: List[dict]
    initial_loss: float
    final_loss: float


def _eval_loss(model: QResVAE, x: np.ndarray, cfg: TrainConfig) -> float:
    """Loss on a fixed batch with a fixed noise draw, so values are comparable."""
    with T.no_grad():
        terms = loss(Tensor._wrap(x), model, cfg.lmbda, np.random.default_rng(cfg.seed + 7919),
                     cfg.distortion)
    return terms.total.item()


def write_loss_csv(path, history: Sequence[dict]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["step", "total", "rate_bpp", "distortion"])
    for row in history:
        writer.writerow([row["step"], repr(row["total"]), repr(row["rate_bpp"]), repr(row["distortion"])])
    atomic_write_text(path, buf.getvalue())


def train(cfg: TrainConfig, dataset: Optional[SyntheticDataset] = None,
          model_config: Optional[ModelConfig] = None, out_dir: Optional[str] = None,
          model: Optional[QResVAE] = None, lossless: bool = False) -> TrainResult:
    """Seeded Adam training with gradient clipping and EMA shadows.

    Writes ``loss.csv``, ``model_ema.qrwt`` and ``model_raw.qrwt`` to
    ``out_dir`` when given. A non-finite loss raises ``TrainingDivergence``
    pointing at the last good checkpoint.
    """
    cfg.validate()
    if dataset is None:
        dataset = SyntheticDataset(cfg.data_kind, cfg.image_size, cfg.data_count, cfg.seed)
    if model is None:
        model_config = replace(model_config or ModelConfig.small(), lambdas=(float(cfg.lmbda),))
        model = QResVAE(model_config, seed=cfg.seed)
    pool = np.stack([img.transpose(2, 0, 1) for img in dataset])
    rng = np.random.default_rng(cfg.seed)
    eval_x = _batch(pool, np.random.default_rng(cfg.seed + 1), cfg)

    def step_loss(xb, r):
        if lossless:
            return lossless_loss(xb, model, r)
        return loss(Tensor._wrap(xb / 255.0), model, cfg.lmbda, r, cfg.distortion)

    def fixed_loss(m):
        if lossless:
            with T.no_grad():
                return lossless_loss(eval_x, m, np.random.default_rng(cfg.seed + 7919)).total.item()
        return _eval_loss(m, eval_x / 255.0, cfg)

    params = model.parameters()
    opt = Adam(params, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    shadow = model.state_dict()
    initial = fixed_loss(model)
    history: List[dict] = []
    last_good = None
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    for step in range(1, cfg.steps + 1):
        xb = _batch(pool, rng, cfg)
        model.zero_grad()
        try:
            terms = step_loss(xb, rng)
            total = terms.total.item()
            if not np.isfinite(total):
                raise NonFiniteError(f"loss is {total}")
            terms.total.backward()
        except NonFiniteError as exc:
            if out_dir:
                last_good = os.path.join(out_dir, "model_last_good.qrwt")
                model.with_weights(shadow, role="ema").save(last_good)
            raise TrainingDivergence(f"non-finite loss at step {step}: {exc}", step=step,
                                     last_good=last_good) from exc
        clip_gradients(params, cfg.grad_clip)
        opt.step()
        ema_update(shadow, model, cfg.ema_decay)
        if step % cfg.log_every == 0 or step == 1 or step == cfg.steps:
            history.append({"step": step, "total": total, "rate_bpp": terms.rate_bpp,
                            "distortion": terms.distortion.item()})
            log.debug("step %d loss %.5f", step, total)

    ema_model = model.with_weights(shadow, role="ema")
    raw_model = model.with_weights(model.state_dict(), role="raw")
    final = fixed_loss(ema_model)
    if out_dir:
        write_loss_csv(os.path.join(out_dir, "loss.csv"), history)
        ema_model.save(os.path.join(out_dir, "model_ema.qrwt"))
        raw_model.save(os.path.join(out_dir, "model_raw.qrwt"))
    return TrainResult(ema_model, raw_model, history, initial, final)


def _batch(pool: np.ndarray, rng: np.random.Generator, cfg: TrainConfig) -> np.ndarray:
    """uint8-valued float batch (N, 3, H, W) with optional crops and flips."""
    idx = rng.integers(0, pool.shape[0], size=cfg.batch_size)
    x = pool[idx].astype(np.float64)
    if cfg.crop_size is not None:
        c = cfg.crop_size
        h, w = x.shape[2:]
        if c > min(h, w):
            raise ContractError(f"crop {c} exceeds images of {h}x{w}")
        y0 = int(rng.integers(0, h - c + 1))
        x0 = int(rng.integers(0, w - c + 1))
        x = x[:, :, y0:y0 + c, x0:x0 + c]
    if cfg.hflip:
        flip = rng.random(cfg.batch_size) < 0.5
        x[flip] = x[flip][..., ::-1]
    return np.ascontiguousarray(x)


def finetune_lossless(model: QResVAE, cfg: TrainConfig, dataset: Optional[SyntheticDataset] = None,
                      out_dir: Optional[str] = None) -> TrainResult:
    """Attach a lossless head and train all weights on latent rate plus pixel code length."""
    return train(cfg, dataset, out_dir=out_dir, model=model.with_lossless_head(seed=cfg.seed),
                 lossless=True)


# -- evaluation -----------------------------------------------------------------

@dataclass
class RDPoint:
    lmbda: float
    bpp_estimated: float
    bpp_actual: float
    psnr: float
    mse: float
    ms_ssim: Optional[float] = None

    def as_row(self) -> List:
        return [self.lmbda, self.bpp_estimated, self.bpp_actual, self.psnr,
                "" if self.ms_ssim is None else self.ms_ssim]


RD_HEADER = ["lambda", "bpp_est", "bpp_actual", "psnr", "ms_ssim"]


@dataclass
class Evaluation:
    mean: RDPoint
    per_image: List[RDPoint]
    names: List[str] = field(default_factory=list)


def evaluate_image(img: np.ndarray, model: QResVAE, lmbda: Optional[float] = None) -> RDPoint:
    lmbda = float(lmbda if lmbda is not None else (model.config.lambdas or (0.0,))[0])
    res = compress_with_stats(img, model, threads=1)
    x_hat = res.reconstruction
    ssim = None
    if metrics.ms_ssim_scales(*img.shape[:2]) > 0:
        ssim = metrics.ms_ssim(img, x_hat)
    return RDPoint(lmbda, res.bpp_estimated(), res.bpp_actual(), metrics.psnr(img, x_hat),
                   metrics.mse(img, x_hat), ssim)


def evaluate(model: QResVAE, images: Sequence[np.ndarray], lmbda: Optional[float] = None,
             jobs: Optional[int] = 1, names: Optional[Sequence[str]] = None) -> Evaluation:
    """Metrics per image, then averaged over images."""
    images = list(images)
    if not images:
        raise ContractError("no images to evaluate")
    workers = resolve_threads(jobs)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            points = list(ex.map(lambda im: evaluate_image(im, model, lmbda), images))
    else:
        points = [evaluate_image(im, model, lmbda) for im in images]
    ssims = [p.ms_ssim for p in points]
    mean = RDPoint(
        points[0].lmbda,
        metrics.per_image_mean(p.bpp_estimated for p in points),
        metrics.per_image_mean(p.bpp_actual for p in points),
        metrics.per_image_mean(p.psnr for p in points),
        metrics.per_image_mean(p.mse for p in points),
        None if any(s is None for s in ssims) else metrics.per_image_mean(ssims),
    )
    return Evaluation(mean, points, list(names) if names else [f"img{i:04d}" for i in range(len(points))])


def write_rd_csv(path, evaluation: Evaluation) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["image"] + RD_HEADER)
    for name, p in zip(evaluation.names, evaluation.per_image):
        writer.writerow([name] + p.as_row())
    writer.writerow(["mean"] + evaluation.mean.as_row())
    atomic_write_text(path, buf.getvalue())


@dataclass
class RateDistribution:
    """Mean coded bpp per latent block, ordered ``Z_1`` (coarsest) to ``Z_N``."""

    block_bpp: List[float]
    total_payload_bpp: float
    collapse_threshold: float = 1e-3

    @property
    def collapsed(self) -> List[int]:
        return [i for i, b in enumerate(self.block_bpp) if b < self.collapse_threshold]

    def rows(self) -> List[List]:
        return [[f"Z_{i + 1}", b, i in self.collapsed] for i, b in enumerate(self.block_bpp)]


def rate_distribution(model: QResVAE, images: Sequence[np.ndarray]) -> RateDistribution:
    """Per-block information content of the coded streams (state flush excluded)."""
    images = list(images)
    if not images:
        raise ContractError("no images given")
    per_block = np.zeros((len(images), model.config.num_blocks))
    totals = np.zeros(len(images))
    for i, img in enumerate(images):
        coded = compress_with_stats(img, model, threads=1).coded
        bits = [coded_bits(s) for s in coded.streams]
        per_block[i] = np.asarray(bits) / coded.pixels
        totals[i] = sum(bits) / coded.pixels
    return RateDistribution(per_block.mean(axis=0).tolist(), float(totals.mean()))


def write_rate_csv(path, dist: RateDistribution) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["block_index", "bpp"])
    for i, b in enumerate(dist.block_bpp):
        writer.writerow([i + 1, repr(b)])
    atomic_write_text(path, buf.getvalue())
