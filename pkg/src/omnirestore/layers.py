"""Parameter-holding modules built on the tensor engine.

A Module owns named parameters (Tensors with ``requires_grad``) and
submodules; ``named_parameters`` walks the tree in declaration order, which
fixes the serialization order used by checkpoints. Construction takes an
explicit ``numpy.random.Generator`` so identical seeds rebuild identical
weights.
"""

from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from .engine import Tensor, ops
from .errors import ConfigError, ShapeError


class Module:
    """Base for parameterized blocks; discovers parameters by attribute walk."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{full}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ConfigError(f"state dict mismatch; missing={missing}, unexpected={extra}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {name}: shape {arr.shape} != {p.data.shape}")
            p.data = arr.astype(p.data.dtype).copy()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _param(rng: np.random.Generator, shape, std: float, dtype, zero: bool = False) -> Tensor:
    if zero or std == 0.0:
        data = np.zeros(shape, dtype=dtype)
    else:
        data = (rng.standard_normal(shape) * std).astype(dtype)
    return Tensor(data, requires_grad=True)


class Conv2d(Module):
    """3x3-style convolution layer; He-scaled normal init, optional zero init."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 bias: bool = True, zero_init: bool = False, dtype=np.float32):
        self.stride = stride
        self.padding = padding
        std = math.sqrt(2.0 / (in_channels * kernel * kernel))
        self.weight = _param(rng, (out_channels, in_channels, kernel, kernel),
                             std, dtype, zero=zero_init)
        self.bias = _param(rng, (out_channels,), 0.0, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          padding=self.padding)


class DepthwiseConv2d(Module):
    """Per-channel convolution with one kernel per channel.

    ``forward_rows`` applies only the kernels belonging to a per-item channel
    selection, which keeps the cost proportional to the number of selected
    channels.
    """

    def __init__(self, channels: int, kernel: int, rng: np.random.Generator,
                 padding: int = 0, bias: bool = True, zero_init: bool = False,
                 dtype=np.float32):
        self.padding = padding
        std = math.sqrt(2.0 / (kernel * kernel))
        self.weight = _param(rng, (channels, kernel, kernel), std, dtype, zero=zero_init)
        self.bias = _param(rng, (channels,), 0.0, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.depthwise_conv2d(x, self.weight, self.bias, padding=self.padding)

    def forward_rows(self, x: Tensor, idx: np.ndarray) -> Tensor:
        w = ops.take_rows(self.weight, idx)
        b = ops.take_rows(self.bias, idx) if self.bias is not None else None
        return ops.depthwise_conv2d(x, w, b, padding=self.padding)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, zero_init: bool = False, dtype=np.float32):
        std = math.sqrt(1.0 / in_features)
        self.weight = _param(rng, (in_features, out_features), std, dtype, zero=zero_init)
        self.bias = _param(rng, (out_features,), 0.0, dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.linear(x, self.weight, self.bias)


class ChannelNorm(Module):
    """Layer normalization over the channel axis of NCHW maps (or last axis
    of 2-D inputs), with per-channel gain and shift."""

    def __init__(self, channels: int, dtype=np.float32, eps: float = 1e-5):
        self.eps = eps
        self.gain = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.shift = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        axis = 1 if x.ndim == 4 else -1
        return ops.layer_norm(x, self.gain, self.shift, axis=axis, eps=self.eps)


class Mlp(Module):
    """linear -> gelu -> linear."""

    def __init__(self, in_features: int, hidden: int, out_features: int,
                 rng: np.random.Generator, zero_init_last: bool = False,
                 dtype=np.float32):
        self.fc1 = Linear(in_features, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, out_features, rng, zero_init=zero_init_last, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class ConvFfn(Module):
    """Pointwise feed-forward over channels: 1x1 conv -> gelu -> 1x1 conv."""

    def __init__(self, channels: int, rng: np.random.Generator, expand: int = 2,
                 dtype=np.float32):
        self.fc1 = Conv2d(channels, channels * expand, 1, rng, dtype=dtype)
        self.fc2 = Conv2d(channels * expand, channels, 1, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


def flatten_positions(x: Tensor) -> tuple[Tensor, tuple[int, int, int, int]]:
    """NCHW -> [N, H*W, C] token layout for spatial attention."""
    n, c, h, w = x.shape
    tokens = ops.transpose(ops.reshape(x, (n, c, h * w)), (0, 2, 1))
    return tokens, (n, c, h, w)


def unflatten_positions(tokens: Tensor, shape: tuple[int, int, int, int]) -> Tensor:
    n, c, h, w = shape
    return ops.reshape(ops.transpose(tokens, (0, 2, 1)), (n, c, h, w))


def scaled_scores(q: Tensor, k: Tensor) -> Tensor:
    """Single-head attention logits over positions: Q K^T / sqrt(d)."""
    d = q.shape[-1]
    scores = ops.matmul(q, ops.transpose(k, (0, 2, 1)))
    return ops.mul_scalar(scores, 1.0 / math.sqrt(d))


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10000.0,
                         dtype=np.float32) -> np.ndarray:
    """Classic sin/cos position code for integer timesteps, shape [N, dim]."""
    if dim % 2 != 0:
        raise ConfigError(f"sinusoidal embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(dtype)
