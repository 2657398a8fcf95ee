"""Two-round feedback segmentation model and its feedback modules.

Round 1 runs encoder and decoder as usual. The two finest pyramid maps s1
and s2 are concatenated and turned into an injection tensor, which is added
(scaled by a learnable scalar) to the stage-1 patch embedding when the same
weights run a second time. The second round's logits are the prediction.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from . import ops
from .config import ModelConfig
from .decoder import FCNHead, PyramidFeatures, SemanticFPN
from .encoder import Encoder, StageFeatures
from .errors import ConfigError, ShapeError
from .nn import Conv2d, GroupNorm, Module, to_image, to_tokens
from .tensor import Parameter, Rng, Tensor, default_dtype


@dataclass
class FeedbackState:
    round1_concat: Tensor  # s1 || s2 from round 1
    injection: Tensor  # feedback module output, before the beta/gamma scale


@dataclass
class RoundOutput:
    logits: Tensor
    aux: Optional[Tensor]
    pyramid: PyramidFeatures
    features: StageFeatures


@dataclass
class FeedbackOutput:
    logits1: Tensor
    aux1: Optional[Tensor]
    logits2: Tensor
    aux2: Optional[Tensor]
    state: Optional[FeedbackState]
    round1: RoundOutput
    round2: RoundOutput

    @property
    def logits(self) -> Tensor:
        return self.logits2


def _scalar(value: float) -> Parameter:
    return Parameter(np.array(value, dtype=default_dtype()))


def inject(e1: Tensor, injection: Tensor, scale: Union[Tensor, float]) -> Tensor:
    """``e1 + scale * injection``."""
    if e1.shape != injection.shape:
        raise ShapeError(f"injection shape {injection.shape} does not match stage-1 features {e1.shape}")
    return e1 + scale * injection


class LiteFeedback(Module):
    """Depthwise spatial mixing with identity residual, then pointwise channel mixing.

    concat(s1, s2) -> x + norm(dw3x3(x)) -> 1x1 (2C -> hidden) -> GELU -> 1x1 (hidden -> out)
    """

    def __init__(self, pyramid_channels: int, out_channels: int, rng: Rng, hidden: int = 64,
                 beta_init: float = 1.0):
        c = 2 * pyramid_channels
        self.in_channels, self.out_channels = c, out_channels
        self.dw = Conv2d(c, c, 3, rng.child(0), padding=1, groups=c)
        self.norm = GroupNorm(c)
        self.pw1 = Conv2d(c, hidden, 1, rng.child(1))
        self.pw2 = Conv2d(hidden, out_channels, 1, rng.child(2))
        self.beta = _scalar(beta_init)

    @property
    def scale(self) -> Parameter:
        return self.beta

    def forward(self, s1: Tensor, s2: Tensor, e1: Optional[Tensor] = None) -> Tensor:
        if s1.shape != s2.shape:
            raise ShapeError(f"s1 {s1.shape} and s2 {s2.shape} must share a shape")
        x = ops.concat([s1, s2], axis=1)
        x = x + self.norm(self.dw(x))
        return self.pw2(ops.gelu(self.pw1(x)))


class FeedbackAttention(Module):
    """Attention-based feedback baseline.

    ``self`` mode draws queries, keys and values from the round-1 feedback
    map; ``source-target`` takes queries from the round-2 stage-1 features.
    Projections run at 1/4 scale, attention on an average-pooled grid, and
    the result is bilinearly restored before the output projection.
    """

    def __init__(self, mode: str, pyramid_channels: int, target_channels: int, rng: Rng,
                 downsample: int = 4, gamma_init: float = 0.0):
        if mode not in ("self", "source-target"):
            raise ConfigError(f"feedback attention mode {mode!r}; expected 'self' or 'source-target'")
        fb = 2 * pyramid_channels
        dim = target_channels
        self.mode, self.downsample, self.dim = mode, downsample, dim
        self.in_channels, self.out_channels = fb, target_channels
        self.query = Conv2d(fb if mode == "self" else target_channels, dim, 1, rng.child(0))
        self.key = Conv2d(fb, dim, 1, rng.child(1))
        self.value = Conv2d(fb, dim, 1, rng.child(2))
        self.out = Conv2d(dim, target_channels, 1, rng.child(3))
        self.gamma = _scalar(gamma_init)
        self.last_weights: Optional[Tensor] = None

    @property
    def scale(self) -> Parameter:
        return self.gamma

    def forward(self, s1: Tensor, s2: Tensor, e1: Optional[Tensor] = None) -> Tensor:
        fb = ops.concat([s1, s2], axis=1)
        h, w = fb.shape[-2:]
        if h % self.downsample or w % self.downsample:
            raise ShapeError(f"attention downsample {self.downsample} does not divide {h}x{w}")
        if self.mode == "self":
            q_src = fb
        else:
            if e1 is None:
                raise ShapeError("source-target feedback attention needs stage-1 features")
            q_src = e1
        pool = self.downsample
        q = ops.avg_pool(self.query(q_src), pool) if pool > 1 else self.query(q_src)
        k = ops.avg_pool(self.key(fb), pool) if pool > 1 else self.key(fb)
        v = ops.avg_pool(self.value(fb), pool) if pool > 1 else self.value(fb)
        hh, ww = q.shape[-2:]
        out, self.last_weights = ops.attention(to_tokens(q), to_tokens(k), to_tokens(v), 1, return_weights=True)
        out = ops.resize_bilinear(to_image(out, hh, ww), h, w)
        return self.out(out)


def build_feedback_module(config: ModelConfig, rng: Rng) -> Optional[Module]:
    fb = config.feedback
    c = config.decoder.channels
    target = config.encoder.dims[0]
    if fb.mode == "none":
        return None
    if fb.mode == "lite":
        return LiteFeedback(c, target, rng, hidden=fb.hidden, beta_init=fb.beta_init)
    mode = "self" if fb.mode == "attn_self" else "source-target"
    return FeedbackAttention(mode, c, target, rng, downsample=fb.attn_downsample)


class FeedbackFormer(Module):
    """MetaFormer encoder + Semantic FPN decoder + optional feedback round.

    With ``feedback.mode == "none"`` this is the plain single-pass baseline.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        rng = Rng(seed)
        self.encoder = Encoder(config.encoder, rng.child(1))
        self.decoder = SemanticFPN(config.encoder.dims, config.decoder, rng.child(2))
        self.aux_head = FCNHead(config.encoder.dims[2], config.decoder.channels, config.decoder.num_classes,
                                rng.child(3))
        self.feedback = build_feedback_module(config, rng.child(4))

    @property
    def num_classes(self) -> int:
        return self.config.decoder.num_classes

    def run_round(self, image: Tensor, inject_fn=None, with_aux: Optional[bool] = None) -> RoundOutput:
        with_aux = self.training if with_aux is None else with_aux
        h, w = image.shape[-2:]
        feats = self.encoder(image, inject_fn)
        pyramid = self.decoder.pyramid(feats)
        logits = self.decoder.predict(pyramid, h, w)
        aux = self.aux_head(feats.f3, h, w) if with_aux else None
        return RoundOutput(logits, aux, pyramid, feats)

    def forward(self, image, rounds: int = 2, zero_injection: bool = False,
                with_aux: Optional[bool] = None) -> FeedbackOutput:
        return two_round_forward(image, self, rounds=rounds, zero_injection=zero_injection, with_aux=with_aux)

    def predict(self, image) -> np.ndarray:
        """Arg-max labels of the final logits, shape (N, H, W)."""
        from .tensor import no_grad

        was_training = self.training
        self.eval()
        try:
            with no_grad():
                out = self.forward(image)
        finally:
            self.train(was_training)
        return out.logits2.data.argmax(axis=1)


def _batched(image) -> Tensor:
    if not isinstance(image, Tensor):
        image = Tensor(np.asarray(image, dtype=default_dtype()))
    if image.ndim == 3:
        image = ops.reshape(image, (1,) + image.shape)
    if image.ndim != 4:
        raise ShapeError(f"expected a CxHxW or NxCxHxW image, got shape {image.shape}")
    return image


def two_round_forward(image, model: FeedbackFormer, rounds: int = 2, zero_injection: bool = False,
                      with_aux: Optional[bool] = None) -> FeedbackOutput:
    image = _batched(image)
    first = model.run_round(image, with_aux=with_aux)
    if model.feedback is None or rounds == 1:
        return FeedbackOutput(first.logits, first.aux, first.logits, first.aux, None, first, first)
    s1, s2 = first.pyramid.s1, first.pyramid.s2
    concat = ops.concat([s1, s2], axis=1)
    captured = {}

    def inject_fn(e1: Tensor) -> Tensor:
        injection = model.feedback(s1, s2, e1)
        captured["injection"] = injection
        if zero_injection:
            return injection * 0.0
        return model.feedback.scale * injection

    second = model.run_round(image, inject_fn, with_aux=with_aux)
    state = FeedbackState(concat, captured["injection"])
    return FeedbackOutput(first.logits, first.aux, second.logits, second.aux, state, first, second)
