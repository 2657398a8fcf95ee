"""Parameter and multiply-accumulate (MAC) accounting by symbolic traversal.

One MAC is one multiply plus one add. Default convention, chosen to match
common module-hook profilers:

* conv / linear weights only: ``C_out * C_in / groups * k^2 * H_out * W_out``;
* biases and normalization affines add parameters but no MACs;
* attention score (``q k^T``) and aggregation (``A v``) products are *not*
  counted, since they are functional ops rather than layers;
* the auxiliary head is training-only, so its MACs are excluded.

Each of these is a flag on :class:`Convention`.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Tuple

from .decoder import ConvNormAct, SemanticFPN
from .encoder import Encoder
from .feedback import FeedbackAttention, FeedbackFormer, LiteFeedback
from .nn import Conv2d, Linear, Module


@dataclass(frozen=True)
class Convention:
    per_pass: bool = True  # count shared weights once per forward round
    include_bias: bool = False
    include_norm: bool = False
    attention_products: bool = False
    include_aux: bool = False


@dataclass
class ProfileRow:
    name: str
    params: int
    macs: int
    passes: int = 1

    @property
    def counted_params(self) -> int:
        return self.params * self.passes

    @property
    def counted_macs(self) -> int:
        return self.macs * self.passes


@dataclass
class ProfileReport:
    model: str
    input_size: Tuple[int, int]
    convention: Convention
    rows: List[ProfileRow] = field(default_factory=list)

    @property
    def unique_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def per_pass_total_params(self) -> int:
        return sum(r.counted_params for r in self.rows)

    @property
    def total_params(self) -> int:
        return self.per_pass_total_params if self.convention.per_pass else self.unique_params

    @property
    def total_macs(self) -> int:
        return sum(r.counted_macs for r in self.rows)

    def subtotal(self, prefix: str) -> Tuple[int, int]:
        rows = [r for r in self.rows if r.name.startswith(prefix)]
        return sum(r.params for r in rows), sum(r.macs for r in rows)

    def to_table(self) -> str:
        h, w = self.input_size
        lines = [f"# {self.model} @ 3x{h}x{w}  (input resolution assumed; not stated for the reference tables)",
                 f"# convention: {', '.join(f'{k}={v}' for k, v in asdict(self.convention).items())}"]
        header = ("module", "params", "MACs", "passes")
        body = [(r.name, f"{r.params:,}", f"{r.macs:,}", str(r.passes)) for r in self.rows]
        widths = [max(len(x[i]) for x in [header, *body]) for i in range(4)]
        fmt = lambda row: "  ".join(c.ljust(wd) if i == 0 else c.rjust(wd) for i, (c, wd) in enumerate(zip(row, widths)))
        lines.append(fmt(header))
        lines.extend(fmt(row) for row in body)
        lines.append(f"unique params:   {self.unique_params:,} ({self.unique_params / 1e6:.2f}M)")
        lines.append(f"per-pass params: {self.per_pass_total_params:,} ({self.per_pass_total_params / 1e6:.2f}M)")
        lines.append(f"total MACs:      {self.total_macs:,} ({self.total_macs / 1e9:.2f}G)")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["module", "params", "macs", "passes"])
        for r in self.rows:
            writer.writerow([r.name, r.params, r.macs, r.passes])
        writer.writerow(["TOTAL", self.total_params, self.total_macs, ""])
        return buf.getvalue()


class _Counter:
    def __init__(self, conv: Convention):
        self.conv = conv

    def conv2d(self, layer: Conv2d, h: int, w: int) -> Tuple[int, int, int]:
        ho, wo = layer.output_hw(h, w)
        k = layer.kernel_size
        macs = layer.out_channels * (layer.in_channels // layer.groups) * k * k * ho * wo
        if self.conv.include_bias and layer.bias is not None:
            macs += layer.out_channels * ho * wo
        return macs, ho, wo

    def linear(self, layer: Linear, tokens: int) -> int:
        macs = layer.in_features * layer.out_features * tokens
        if self.conv.include_bias and layer.bias is not None:
            macs += layer.out_features * tokens
        return macs

    def norm(self, elements: int) -> int:
        return elements if self.conv.include_norm else 0

    def attention(self, nq: int, nk: int, dim: int) -> int:
        return 2 * nq * nk * dim if self.conv.attention_products else 0

    def conv_block(self, block: ConvNormAct, h: int, w: int) -> Tuple[int, int, int]:
        macs, h, w = self.conv2d(block.conv, h, w)
        return macs + self.norm(block.conv.out_channels * h * w), h, w


def _encoder_rows(enc: Encoder, h: int, w: int, c: _Counter, prefix: str):
    rows, shapes = [], []
    for i, stage in enumerate(enc.stages):
        macs, h, w = c.conv2d(stage.embed, h, w)
        tokens = h * w
        rows.append(ProfileRow(f"{prefix}stage{i + 1}.embed", stage.embed.num_parameters(), macs))
        block_macs = 0
        for block in stage.blocks:
            attn, mlp = block.attn, block.mlp
            block_macs += c.linear(attn.qkv, tokens) + c.linear(attn.proj, tokens)
            block_macs += c.attention(tokens, tokens, attn.dim)
            block_macs += c.linear(mlp.fc1, tokens) + c.linear(mlp.fc2, tokens)
            block_macs += 2 * c.norm(tokens * stage.dim)
        rows.append(ProfileRow(f"{prefix}stage{i + 1}.blocks",
                               sum(b.num_parameters() for b in stage.blocks), block_macs))
        rows.append(ProfileRow(f"{prefix}stage{i + 1}.norm", stage.norm.num_parameters(),
                               c.norm(tokens * stage.dim)))
        shapes.append((stage.dim, h, w))
    return rows, shapes


def _decoder_rows(dec: SemanticFPN, shapes, out_hw, c: _Counter, prefix: str):
    rows = []
    lat_macs = sum(c.conv2d(conv, h, w)[0] for conv, (_, h, w) in zip(dec.lateral, shapes))
    rows.append(ProfileRow(f"{prefix}lateral", sum(m.num_parameters() for m in dec.lateral), lat_macs))
    out_macs = sum(c.conv2d(conv, h, w)[0] for conv, (_, h, w) in zip(dec.output, shapes))
    rows.append(ProfileRow(f"{prefix}output", sum(m.num_parameters() for m in dec.output), out_macs))
    head_macs = 0
    final = None
    for head, (_, h, w) in zip(dec.scale_heads, shapes):
        for block in head.convs:
            macs, h, w = c.conv_block(block, h, w)
            head_macs += macs
            if head.n_up:
                h, w = 2 * h, 2 * w
        final = (h, w)
    rows.append(ProfileRow(f"{prefix}scale_heads", sum(m.num_parameters() for m in dec.scale_heads), head_macs))
    cls_macs, _, _ = c.conv2d(dec.classifier, *final)
    rows.append(ProfileRow(f"{prefix}classifier", dec.classifier.num_parameters(), cls_macs))
    return rows


def _aux_row(model: FeedbackFormer, shapes, c: _Counter, prefix: str) -> ProfileRow:
    head = model.aux_head
    _, h, w = shapes[2]
    macs, h, w = c.conv_block(head.conv, h, w)
    macs += c.conv2d(head.classifier, h, w)[0]
    return ProfileRow(f"{prefix}aux_head", head.num_parameters(), macs if c.conv.include_aux else 0)


def feedback_macs(module: Module, h: int, w: int, conv: Convention = Convention()) -> int:
    """MACs of one feedback-module call on an (h, w) = 1/4-scale grid."""
    c = _Counter(conv)
    if isinstance(module, LiteFeedback):
        macs, _, _ = c.conv2d(module.dw, h, w)
        macs += c.norm(module.in_channels * h * w)
        macs += c.conv2d(module.pw1, h, w)[0] + c.conv2d(module.pw2, h, w)[0]
        return macs
    if isinstance(module, FeedbackAttention):
        macs = sum(c.conv2d(layer, h, w)[0] for layer in (module.query, module.key, module.value, module.out))
        n = (h // module.downsample) * (w // module.downsample)
        return macs + c.attention(n, n, module.dim)
    raise TypeError(f"not a feedback module: {type(module).__name__}")


def profile(model: FeedbackFormer, input_size=(256, 256), convention: Convention = Convention(),
            name: Optional[str] = None) -> ProfileReport:
    h, w = input_size if isinstance(input_size, tuple) else (input_size, input_size)
    model.encoder.check_input(h, w)
    c = _Counter(convention)
    passes = 2 if model.feedback is not None else 1
    enc_rows, shapes = _encoder_rows(model.encoder, h, w, c, "encoder.")
    rows = enc_rows + _decoder_rows(model.decoder, shapes, (h, w), c, "decoder.")
    rows.append(_aux_row(model, shapes, c, ""))
    for r in rows:
        r.passes = passes
    if model.feedback is not None:
        _, fh, fw = shapes[0]
        rows.append(ProfileRow("feedback", model.feedback.num_parameters(),
                               feedback_macs(model.feedback, fh, fw, convention)))
    label = name or f"{model.config.encoder.variant} feedback={model.config.feedback.mode}"
    return ProfileReport(label, (h, w), convention, rows)
