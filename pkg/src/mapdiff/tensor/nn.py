"""Minimal parameter containers used by the denoiser."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import ops
from .core import Tensor


class Module:
    """Parameter container; parameters are found by walking attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = _uniform(rng, (n_in, n_out), n_in)
        self.bias = _uniform(rng, (n_out,), n_in) if bias else None

    def forward(self, x):
        out = ops.matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 stride: int = 1, groups: int = 1, bias: bool = True):
        fan_in = (c_in // groups) * k * k
        self.weight = _uniform(rng, (c_out, c_in // groups, k, k), fan_in)
        self.bias = _uniform(rng, (c_out,), fan_in) if bias else None
        self.stride = stride
        self.groups = groups

    def forward(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride,
                          padding="zero", groups=self.groups)


class ConvTranspose2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 2):
        fan_in = c_out * k * k
        self.weight = _uniform(rng, (c_in, c_out, k, k), fan_in)
        self.bias = _uniform(rng, (c_out,), fan_in)
        self.stride = stride

    def forward(self, x):
        return ops.conv_transpose2d(x, self.weight, self.bias, stride=self.stride,
                                    padding=1, output_padding=self.stride - 1)


def layer_norm_channels(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize ``x[b,c,h,w]`` over the channel axis, without affine terms."""
    mu = ops.mean(x, axis=1, keepdims=True)
    xc = x - mu
    var = ops.mean(ops.square(xc), axis=1, keepdims=True)
    return xc / ops.sqrt(var + eps)


def global_avg_pool(x: Tensor) -> Tensor:
    return ops.mean(x, axis=(2, 3))
