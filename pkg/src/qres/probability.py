"""Quantization-aware posterior and prior for the latent variables.

The posterior of every latent element is ``U(mu - 1/2, mu + 1/2)`` and the
prior is a Gaussian ``N(mu_hat, sigma_hat^2)`` convolved with
``U(-1/2, 1/2)``. Its density at ``z`` is the Gaussian mass of the unit
window centred on ``z``; restricted to the lattice ``mu_hat + n`` it is the
discretized Gaussian used for entropy coding.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor, normal_cdf_array

SIGMA_MIN = 0.11
SIGMA_MAX = 64.0
TAIL_BOUND = 6.0
PRECISION = 16
TOTAL = 1 << PRECISION
LOG_FLOOR = 2.0 ** -24


@dataclass
class PosteriorStats:
    mu: Tensor


@dataclass
class PriorStats:
    mu_hat: Tensor
    sigma_hat: Tensor

    def __post_init__(self):
        if self.mu_hat.shape != self.sigma_hat.shape:
            raise ShapeError(f"prior mean {self.mu_hat.shape} vs scale {self.sigma_hat.shape}")


@dataclass(frozen=True)
class QuantizedPmf:
    """Integer CDF over symbols ``offset .. offset + alphabet_size - 1``.

    ``cdf[0] == 0``, ``cdf[-1] == 2**16`` and every symbol has frequency at
    least one.
    """

    offset: int
    cdf: np.ndarray

    @property
    def alphabet_size(self) -> int:
        return len(self.cdf) - 1

    def freq(self, index: int) -> int:
        return int(self.cdf[index + 1] - self.cdf[index])

    def start(self, index: int) -> int:
        return int(self.cdf[index])

    def probabilities(self) -> np.ndarray:
        return np.diff(self.cdf) / TOTAL


def clamp_scale(sigma: Tensor) -> Tensor:
    return T.clamp(sigma, SIGMA_MIN, SIGMA_MAX)


# -- training-time sampling and likelihoods -----------------------------------

def posterior_sample_train(post: PosteriorStats, rng: np.random.Generator) -> Tensor:
    """Draw ``z = mu + u`` with ``u ~ U(-1/2, 1/2)``; differentiable in ``mu``."""
    noise = rng.uniform(-0.5, 0.5, size=post.mu.shape)
    return T.add(post.mu, Tensor._wrap(noise))


def lattice_mass(offset: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Gaussian mass of ``[d - 1/2, d + 1/2]`` for a zero-mean Gaussian.

    Computed on ``|d|`` so the lower tail of the CDF is used, which keeps
    precision for far-out offsets and makes the function exactly even.
    """
    d = np.abs(offset)
    return normal_cdf_array((0.5 - d) / sigma) - normal_cdf_array((-0.5 - d) / sigma)


def prior_logpdf(z: Tensor, prior: PriorStats) -> Tensor:
    """Elementwise log density of the Gaussian-convolved-uniform prior.

    The probability is floored at 2**-24 so early training never sees -inf.
    """
    if z.shape != prior.mu_hat.shape:
        raise ShapeError(f"latent {z.shape} vs prior {prior.mu_hat.shape}")
    d = T.abs_(T.sub(z, prior.mu_hat))
    sigma = prior.sigma_hat
    upper = T.normal_cdf(T.div(T.sub(T.mul(d, -1.0), -0.5), sigma))
    lower = T.normal_cdf(T.div(T.sub(T.mul(d, -1.0), 0.5), sigma))
    mass = T.clamp(T.sub(upper, lower), lo=LOG_FLOOR)
    return T.log(mass)


def rate_term(z: Tensor, prior: PriorStats) -> Tensor:
    """Total ``-log p(z)`` in nats (scalar)."""
    return T.mul(T.tsum(prior_logpdf(z, prior)), -1.0)


def prior_sample(prior: PriorStats, t: float, rng: np.random.Generator) -> Tensor:
    """``mu_hat + t * (sigma_hat * w + u)``; ``t == 0`` returns ``mu_hat`` itself."""
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"temperature must lie in [0, 1], got {t}")
    mu_hat = prior.mu_hat.data
    if t == 0.0:
        return Tensor._wrap(mu_hat.copy())
    w = rng.standard_normal(mu_hat.shape)
    u = rng.uniform(-0.5, 0.5, size=mu_hat.shape)
    return Tensor._wrap(mu_hat + t * (prior.sigma_hat.data * w + u))


# -- test-time quantization ---------------------------------------------------

def residual_round(mu: np.ndarray, mu_hat: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Quantize ``mu`` to the nearest point of ``mu_hat + Z`` (ties to even).

    Returns ``(z, n)`` with ``z = mu_hat + n`` and integer symbols ``n``.
    """
    mu = np.asarray(mu, dtype=np.float64)
    mu_hat = np.asarray(mu_hat, dtype=np.float64)
    if mu.shape != mu_hat.shape:
        raise ShapeError(f"residual_round: {mu.shape} vs {mu_hat.shape}")
    n = np.rint(mu - mu_hat)
    return mu_hat + n, n.astype(np.int64)


def lattice_symbols(z: np.ndarray, mu_hat: np.ndarray) -> np.ndarray:
    """Recover integer symbols from on-lattice latents, rejecting off-lattice input."""
    diff = np.asarray(z, dtype=np.float64) - np.asarray(mu_hat, dtype=np.float64)
    n = np.rint(diff)
    tol = 8 * np.finfo(np.float64).eps * np.maximum(1.0, np.abs(z))
    if np.any(np.abs(diff - n) > tol):
        raise ContractError("latent is not on the prior-mean lattice")
    return n.astype(np.int64)


def estimated_bits(z: np.ndarray, prior_or_mu_hat, sigma_hat=None) -> float:
    """Ideal code length ``sum(-log2 P(n))`` from the real-valued discretized Gaussian."""
    if isinstance(prior_or_mu_hat, PriorStats):
        mu_hat, sigma_hat = prior_or_mu_hat.mu_hat.data, prior_or_mu_hat.sigma_hat.data
    else:
        mu_hat = prior_or_mu_hat
    n = lattice_symbols(z, mu_hat)
    return symbol_bits(n, np.asarray(sigma_hat, dtype=np.float64))


def symbol_bits(n: np.ndarray, sigma: np.ndarray) -> float:
    mass = lattice_mass(np.asarray(n, dtype=np.float64), np.clip(sigma, SIGMA_MIN, SIGMA_MAX))
    return float(-np.log2(mass).sum())


def tail_bound(sigma: np.ndarray) -> np.ndarray:
    """Largest coded magnitude ``ceil(T * sigma) + 1`` per element."""
    return (np.ceil(TAIL_BOUND * np.asarray(sigma, dtype=np.float64)) + 1).astype(np.int64)


def quantize_masses(masses: np.ndarray) -> np.ndarray:
    """Largest-remainder apportionment of each row to ``2**16`` with a 1-unit floor.

    ``masses`` has shape (M, A). Returns integer frequencies of the same shape.
    Ties in the fractional parts are broken by lower symbol index.
    """
    masses = np.atleast_2d(np.asarray(masses, dtype=np.float64))
    m, a = masses.shape
    if a > TOTAL:
        raise ContractError(f"alphabet of {a} symbols exceeds precision")
    probs = masses / masses.sum(axis=1, keepdims=True)
    budget = TOTAL - a
    scaled = probs * budget
    base = np.floor(scaled)
    frac = scaled - base
    base = base.astype(np.int64)
    leftover = budget - base.sum(axis=1)
    order = np.argsort(-frac, axis=1, kind="stable")
    rank = np.empty_like(order)
    rank[np.arange(m)[:, None], order] = np.arange(a)[None, :]
    return 1 + base + (rank < leftover[:, None])


def discretized_masses(sigma: float, bound: int) -> np.ndarray:
    """Real masses over ``-bound .. bound`` with both tails folded into the edges."""
    n = np.arange(-bound, bound + 1, dtype=np.float64)
    mass = lattice_mass(n, sigma)
    edge = normal_cdf_array((0.5 - bound) / sigma)
    mass[0] = edge
    mass[-1] = edge
    return mass


def build_pmf(mu_hat: float, sigma_hat: float) -> QuantizedPmf:
    """Discretized Gaussian PMF over integer offsets from ``mu_hat``.

    The PMF of ``n = z - mu_hat`` depends on the scale only; ``mu_hat`` fixes
    the lattice the offsets live on.
    """
    if not math.isfinite(mu_hat):
        raise ContractError("prior mean must be finite")
    sigma = float(np.clip(sigma_hat, SIGMA_MIN, SIGMA_MAX))
    bound = int(tail_bound(sigma))
    freqs = quantize_masses(discretized_masses(sigma, bound)[None, :])[0]
    cdf = np.concatenate([[0], np.cumsum(freqs)])
    return QuantizedPmf(offset=-bound, cdf=cdf)


def build_cdf_table(sigma: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Vectorized :func:`build_pmf` for many elements.

    Returns ``(bounds, cdf)`` where row ``i`` of ``cdf`` holds the CDF of
    element ``i`` padded on the right with ``2**16``.
    """
    sigma = np.clip(np.asarray(sigma, dtype=np.float64).ravel(), SIGMA_MIN, SIGMA_MAX)
    bounds = tail_bound(sigma)
    m = sigma.size
    width = 2 * int(bounds.max(initial=0)) + 2
    cdf = np.full((m, width), TOTAL, dtype=np.int64)
    for bound in np.unique(bounds):
        rows = np.nonzero(bounds == bound)[0]
        s = sigma[rows][:, None]
        n = np.arange(-bound, bound + 1, dtype=np.float64)[None, :]
        mass = lattice_mass(n, s)
        edge = normal_cdf_array((0.5 - bound) / s[:, 0])
        mass[:, 0] = edge
        mass[:, -1] = edge
        freqs = quantize_masses(mass)
        cdf[rows, 0] = 0
        cdf[rows, 1:2 * bound + 2] = np.cumsum(freqs, axis=1)
    return bounds, cdf


def pixel_cdf_table(mean: np.ndarray, scale: np.ndarray, levels: int = 256) -> np.ndarray:
    """Discretized Gaussian CDFs over pixel values ``0 .. levels - 1``.

    The lowest and highest values absorb the tails. ``mean`` and ``scale``
    are in pixel units.
    """
    mean = np.asarray(mean, dtype=np.float64).ravel()[:, None]
    scale = np.clip(np.asarray(scale, dtype=np.float64).ravel(), SIGMA_MIN, SIGMA_MAX)[:, None]
    edges = np.arange(levels + 1, dtype=np.float64)[None, :] - 0.5
    cum = normal_cdf_array((edges - mean) / scale)
    cum[:, 0] = 0.0
    cum[:, -1] = 1.0
    mass = np.diff(cum, axis=1)
    mass = np.maximum(mass, 0.0)
    freqs = quantize_masses(mass + 1e-300)
    cdf = np.zeros((mean.shape[0], levels + 1), dtype=np.int64)
    cdf[:, 1:] = np.cumsum(freqs, axis=1)
    return cdf


def pixel_log_likelihood(x: Tensor, mean: Tensor, scale: Tensor, levels: int = 256) -> Tensor:
    """Log mass of integer pixel values under a discretized Gaussian.

    ``x``, ``mean`` and ``scale`` are in pixel units. Value 0 absorbs the
    lower tail and ``levels - 1`` the upper tail; interior masses use the
    offset magnitude so the far tail keeps its precision.
    """
    xd = x.data
    lo_edge = (xd <= 0).astype(np.float64)
    hi_edge = (xd >= levels - 1).astype(np.float64)
    interior = 1.0 - lo_edge - hi_edge
    c = T.sub(Tensor._wrap(xd.copy()), mean)
    d = T.abs_(c)
    mid = T.sub(T.normal_cdf(T.div(T.sub(T.mul(d, -1.0), -0.5), scale)),
                T.normal_cdf(T.div(T.sub(T.mul(d, -1.0), 0.5), scale)))
    low = T.normal_cdf(T.div(T.add(c, 0.5), scale))
    high = T.normal_cdf(T.div(T.sub(T.mul(c, -1.0), -0.5), scale))
    mass = T.add(T.add(T.mul(mid, Tensor._wrap(interior)), T.mul(low, Tensor._wrap(lo_edge))),
                 T.mul(high, Tensor._wrap(hi_edge)))
    return T.log(T.clamp(mass, lo=LOG_FLOOR))
