"""Parameter containers and the building blocks of the network."""
from __future__ import annotations

from typing import Dict, Iterator, Mapping, Tuple

import numpy as np

from . import functional as F
from . import tensor as T
from .errors import FormatError
from .tensor import Tensor


class Module:
    """Minimal parameter container; parameters are found by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor):
                if value.requires_grad:
                    yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        if missing:
            raise FormatError(f"checkpoint lacks parameters: {missing[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise FormatError(f"{name}: checkpoint shape {arr.shape} vs model {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


def _param(arr) -> Tensor:
    return Tensor(arr, requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, kernel: int, rng: np.random.Generator, *,
                 stride: int = 1, padding: int = 0, groups: int = 1, gain: float = 1.0):
        fan_in = (cin // groups) * kernel * kernel
        std = gain / np.sqrt(fan_in)
        self.weight = _param(rng.normal(0.0, std, size=(cout, cin // groups, kernel, kernel)))
        self.bias = _param(np.zeros(cout))
        self.stride = stride
        self.padding = padding
        self.groups = groups

    def __call__(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class LayerNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-6):
        self.weight = _param(np.ones(channels))
        self.bias = _param(np.zeros(channels))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class ConvNeXtBlock(Module):
    """Depthwise conv, channel LayerNorm, pointwise expand, GELU, pointwise project, residual."""

    def __init__(self, dim: int, rng: np.random.Generator, kernel: int = 3, mlp_ratio: int = 2,
                 residual_gain: float = 0.5):
        hidden = dim * mlp_ratio
        self.dwconv = Conv2d(dim, dim, kernel, rng, padding=kernel // 2, groups=dim)
        self.norm = LayerNorm(dim)
        self.pw1 = Conv2d(dim, hidden, 1, rng)
        self.pw2 = Conv2d(hidden, dim, 1, rng, gain=residual_gain)

    def __call__(self, x: Tensor) -> Tensor:
        y = self.dwconv(x)
        y = self.norm(y)
        y = T.gelu(self.pw1(y))
        y = self.pw2(y)
        return T.add(x, y)


class Upsample(Module):
    """Sub-pixel convolution: 1x1 conv to ``cout * r * r`` channels, then pixel shuffle."""

    def __init__(self, cin: int, cout: int, r: int, rng: np.random.Generator):
        self.conv = Conv2d(cin, cout * r * r, 1, rng)
        self.r = r

    def __call__(self, x: Tensor) -> Tensor:
        return F.pixel_shuffle(self.conv(x), self.r)
