"""Semantic FPN decoder and the stage-3 FCN auxiliary head."""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

from . import ops
from .config import DecoderConfig
from .encoder import StageFeatures
from .errors import ShapeError
from .nn import Conv2d, GroupNorm, Module
from .tensor import Rng, Tensor


@dataclass
class PyramidFeatures:
    s1: Tensor
    s2: Tensor
    s3: Tensor
    s4: Tensor

    def as_list(self) -> List[Tensor]:
        return [self.s1, self.s2, self.s3, self.s4]


class ConvNormAct(Module):
    """3x3 conv + group norm + ReLU."""

    def __init__(self, in_ch: int, out_ch: int, rng: Rng):
        self.conv = Conv2d(in_ch, out_ch, 3, rng, padding=1)
        self.norm = GroupNorm(out_ch)

    def forward(self, x: Tensor) -> Tensor:
        return ops.relu(self.norm(self.conv(x)))


def upsample_counts(levels: int = 4) -> List[int]:
    """Number of 2x upsamplings each pyramid level needs to reach 1/4 scale."""
    return list(range(levels))


class ScaleHead(Module):
    """``max(1, n)`` conv blocks, each followed by a 2x bilinear upsample when ``n > 0``."""

    def __init__(self, channels: int, n_up: int, rng: Rng):
        self.n_up = n_up
        self.convs = [ConvNormAct(channels, channels, rng.child(i)) for i in range(max(1, n_up))]

    def forward(self, x: Tensor) -> Tensor:
        for conv in self.convs:
            x = conv(x)
            if self.n_up:
                h, w = x.shape[-2:]
                x = ops.resize_bilinear(x, 2 * h, 2 * w)
        return x


class SemanticFPN(Module):
    def __init__(self, in_dims: Sequence[int], config: DecoderConfig, rng: Rng):
        config.validate()
        self.config = config
        c = config.channels
        self.lateral = [Conv2d(d, c, 1, rng.child(0, i)) for i, d in enumerate(in_dims)]
        self.output = [Conv2d(c, c, 3, rng.child(1, i), padding=1) for i in range(len(in_dims))]
        self.scale_heads = [ScaleHead(c, n, rng.child(2, i)) for i, n in enumerate(upsample_counts(len(in_dims)))]
        self.classifier = Conv2d(c, config.num_classes, 1, rng.child(3))

    def pyramid(self, feats: StageFeatures) -> PyramidFeatures:
        fs = feats.as_list()
        for coarse, fine in zip(fs[1:], fs[:-1]):
            if coarse.shape[-1] * 2 != fine.shape[-1] or coarse.shape[-2] * 2 != fine.shape[-2]:
                raise ShapeError(f"stage features do not halve in resolution: {fine.shape} -> {coarse.shape}")
        lat = [conv(f) for conv, f in zip(self.lateral, fs)]
        if self.config.topdown:
            for i in range(len(lat) - 1, 0, -1):
                lat[i - 1] = lat[i - 1] + ops.upsample_nearest(lat[i], 2)
        outs = [head(conv(x)) for head, conv, x in zip(self.scale_heads, self.output, lat)]
        return PyramidFeatures(*outs)

    def predict(self, pyramid: PyramidFeatures, out_h: int, out_w: int) -> Tensor:
        s = pyramid.as_list()
        merged = s[0]
        for level in s[1:]:
            merged = merged + level
        return ops.resize_bilinear(self.classifier(merged), out_h, out_w)


class FCNHead(Module):
    """Two-convolution auxiliary classifier on stage-3 features (training only)."""

    def __init__(self, in_dim: int, channels: int, num_classes: int, rng: Rng):
        self.conv = ConvNormAct(in_dim, channels, rng.child(0))
        self.classifier = Conv2d(channels, num_classes, 1, rng.child(1))

    def forward(self, f3: Tensor, out_h: int, out_w: int) -> Tensor:
        return ops.resize_bilinear(self.classifier(self.conv(f3)), out_h, out_w)
