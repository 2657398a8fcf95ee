"""Minimal module tree: parameter naming, state dicts and common layers."""
from __future__ import annotations

from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from . import ops
from .errors import ConfigError
from .tensor import Parameter, Rng, Tensor, default_dtype

INIT_STD = 0.02


class Module:
    """Base class. Parameters and sub-modules are discovered from attributes.

    Lists of modules are walked too, so ``self.blocks = [Block(...), ...]``
    yields names like ``blocks.0.attn.qkv.weight``.
    """

    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):  # pragma: no cover - abstract
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)) and value and all(isinstance(v, Module) for v in value):
                for i, v in enumerate(value):
                    yield f"{key}.{i}", v

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                value.name = name
                yield name, value
            else:
                yield from value.named_parameters(prefix=name + ".")

    def named_modules(self, prefix: str = "") -> Iterator[Tuple[str, "Module"]]:
        yield prefix.rstrip("."), self
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_modules(prefix=f"{prefix}{key}.")

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        for _, m in self.named_modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.astype(dtype)
        return self

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = sorted(set(params) - set(state))
        unexpected = sorted(set(state) - set(params))
        if missing or unexpected:
            raise ConfigError(f"state dict mismatch: missing={missing[:5]} unexpected={unexpected[:5]}")
        for name, p in params.items():
            p.assign(state[name])


def _param(values: np.ndarray) -> Parameter:
    return Parameter(values.astype(default_dtype()))


class Linear(Module):
    """Affine map on the last axis; weight is stored (out, in)."""

    def __init__(self, in_features: int, out_features: int, rng: Rng, bias: bool = True):
        self.in_features, self.out_features = in_features, out_features
        self.weight = _param(rng.trunc_normal((out_features, in_features), INIT_STD))
        self.bias = _param(np.zeros(out_features)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = ops.matmul(x, ops.transpose(self.weight, (1, 0)))
        return out + self.bias if self.bias is not None else out


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int, rng: Rng, stride: int = 1,
                 padding: int = 0, groups: int = 1, bias: bool = True):
        if in_channels % groups or out_channels % groups:
            raise ConfigError(f"Conv2d({in_channels}->{out_channels}): channels not divisible by groups={groups}")
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size, self.stride, self.padding, self.groups = kernel_size, stride, padding, groups
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        self.weight = _param(rng.trunc_normal(shape, INIT_STD))
        self.bias = _param(np.zeros(out_channels)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        k, s, p = self.kernel_size, self.stride, self.padding
        return ops.conv_output_size(h, k, s, p), ops.conv_output_size(w, k, s, p)


class LayerNorm(Module):
    """Layer norm over the trailing channel axis of token tensors."""

    def __init__(self, dim: int):
        self.dim = dim
        self.weight = _param(np.ones(dim))
        self.bias = _param(np.zeros(dim))

    def forward(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.weight, self.bias)


class GroupNorm(Module):
    def __init__(self, channels: int, groups: Optional[int] = None):
        groups = groups or default_groups(channels)
        if channels % groups:
            raise ConfigError(f"GroupNorm: {channels} channels not divisible into {groups} groups")
        self.channels, self.groups = channels, groups
        self.weight = _param(np.ones(channels))
        self.bias = _param(np.zeros(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.weight, self.bias)


def default_groups(channels: int) -> int:
    """Largest divisor of ``channels`` not exceeding 32."""
    for g in range(min(32, channels), 0, -1):
        if channels % g == 0:
            return g
    return 1


def to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return ops.transpose(ops.reshape(x, (n, c, h * w)), (0, 2, 1))


def to_image(x: Tensor, h: int, w: int) -> Tensor:
    n, _, c = x.shape
    return ops.reshape(ops.transpose(x, (0, 2, 1)), (n, c, h, w))
