"""Four-stage MetaFormer backbone with self-attention token mixers."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional

from . import ops
from .config import EncoderConfig
from .errors import ShapeError
from .nn import Conv2d, LayerNorm, Linear, Module, to_image, to_tokens
from .tensor import Rng, Tensor


@dataclass
class StageFeatures:
    f1: Tensor
    f2: Tensor
    f3: Tensor
    f4: Tensor
    e1: Optional[Tensor] = None  # stage-1 patch embedding, before any injection

    def as_list(self) -> List[Tensor]:
        return [self.f1, self.f2, self.f3, self.f4]


class Attention(Module):
    """Global multi-head self-attention over a token sequence."""

    def __init__(self, dim: int, heads: int, rng: Rng):
        self.dim, self.heads = dim, heads
        self.qkv = Linear(dim, 3 * dim, rng.child(0), bias=False)
        self.proj = Linear(dim, dim, rng.child(1))
        self.last_weights: Optional[Tensor] = None
        self.keep_weights = False

    def forward(self, x: Tensor) -> Tensor:
        n, t, c = x.shape
        qkv = ops.reshape(self.qkv(x), (n, t, 3, c))
        q, k, v = qkv[:, :, 0], qkv[:, :, 1], qkv[:, :, 2]
        out, weights = ops.attention(q, k, v, self.heads, return_weights=True)
        if self.keep_weights:
            self.last_weights = weights
        return self.proj(out)


class Mlp(Module):
    def __init__(self, dim: int, hidden: int, rng: Rng):
        self.fc1 = Linear(dim, hidden, rng.child(0))
        self.fc2 = Linear(hidden, dim, rng.child(1))

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(ops.gelu(self.fc1(x)))


class MetaFormerBlock(Module):
    """``y = x + attn(norm(x)); z = y + mlp(norm(y))`` on tokens."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, rng: Rng):
        self.norm1 = LayerNorm(dim)
        self.attn = Attention(dim, heads, rng.child(0))
        self.norm2 = LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio), rng.child(1))

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class Stage(Module):
    def __init__(self, in_ch: int, dim: int, depth: int, heads: int, mlp_ratio: float,
                 kernel: int, stride: int, padding: int, rng: Rng):
        self.dim = dim
        self.embed = Conv2d(in_ch, dim, kernel, rng.child(0), stride=stride, padding=padding)
        self.blocks = [MetaFormerBlock(dim, heads, mlp_ratio, rng.child(1, i)) for i in range(depth)]
        self.norm = LayerNorm(dim)

    def forward(self, x: Tensor, inject: Optional[Callable[[Tensor], Tensor]] = None):
        x = self.embed(x)
        embedded = x
        if inject is not None:
            x = x + inject(x)
        h, w = x.shape[-2:]
        tokens = to_tokens(x)
        for block in self.blocks:
            tokens = block(tokens)
        return to_image(self.norm(tokens), h, w), embedded


class Encoder(Module):
    def __init__(self, config: EncoderConfig, rng: Rng, in_channels: int = 3):
        config.validate()
        self.config = config
        stages = []
        prev = in_channels
        for i in range(4):
            stages.append(Stage(prev, config.dims[i], config.depths[i], config.heads[i], config.mlp_ratio,
                                config.patch_kernel[i], config.patch_stride[i], config.patch_padding[i],
                                rng.child(i)))
            prev = config.dims[i]
        self.stages = stages

    def check_input(self, h: int, w: int) -> None:
        r = self.config.reduction
        if h % r or w % r:
            raise ShapeError(f"input {h}x{w} must have height and width divisible by {r}")

    def forward(self, image: Tensor, inject: Optional[Callable[[Tensor], Tensor]] = None) -> StageFeatures:
        """Encode an NCHW batch.

        ``inject`` receives the stage-1 patch embedding and returns a tensor
        added to it before the first block (the feedback entry point).
        """
        self.check_input(*image.shape[-2:])
        feats = []
        x = image
        e1 = None
        for i, stage in enumerate(self.stages):
            x, embedded = stage(x, inject if i == 0 else None)
            if i == 0:
                e1 = embedded
            feats.append(x)
        return StageFeatures(*feats, e1=e1)


def build_encoder(config: EncoderConfig, seed: int = 0) -> Encoder:
    return Encoder(config, Rng(seed).child(1))
