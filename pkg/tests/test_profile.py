import numpy as np
import pytest

from fbformer import ops
from fbformer.config import DecoderConfig, EncoderConfig, FeedbackConfig, ModelConfig
from fbformer.feedback import FeedbackFormer
from fbformer.profile import Convention, feedback_macs, profile
from fbformer.tensor import Rng, no_grad


def small(mode):
    return ModelConfig(
        encoder=EncoderConfig(variant="custom", dims=[8, 16, 24, 32], depths=[1, 1, 2, 1], heads=[1, 2, 3, 4]),
        decoder=DecoderConfig(channels=8, num_classes=3),
        feedback=FeedbackConfig(mode=mode, hidden=8, attn_downsample=2),
    )


@pytest.mark.parametrize("mode", ["none", "lite", "attn_self", "attn_st"])
def test_symbolic_macs_match_runtime_tally(mode):
    model = FeedbackFormer(small(mode)).eval()
    x = Rng(0).normal((1, 3, 64, 64)).astype(np.float32)
    with no_grad(), ops.count_macs() as tally:
        model(x)
    report = profile(model, 64, Convention(attention_products=True))
    assert report.total_macs == tally["conv"] + tally["matmul"]


def test_runtime_tally_with_aux_head():
    model = FeedbackFormer(small("lite")).train()
    with no_grad(), ops.count_macs() as tally:
        model(np.zeros((1, 3, 64, 64), np.float32))
    report = profile(model, 64, Convention(attention_products=True, include_aux=True))
    assert report.total_macs == tally["conv"] + tally["matmul"]


def test_parameter_totals():
    model = FeedbackFormer(small("lite"))
    report = profile(model, 64)
    assert report.unique_params == model.num_parameters()
    fb = model.feedback.num_parameters()
    assert report.per_pass_total_params == 2 * (model.num_parameters() - fb) + fb
    assert report.total_params == report.per_pass_total_params
    assert profile(model, 64, Convention(per_pass=False)).total_params == report.unique_params


def test_totals_are_row_sums():
    report = profile(FeedbackFormer(small("attn_self")), 64)
    assert report.total_macs == sum(r.macs * r.passes for r in report.rows)
    csv_total = report.to_csv().strip().splitlines()[-1].split(",")
    assert csv_total[:3] == ["TOTAL", str(report.total_params), str(report.total_macs)]


def test_conv_macs_quadruple_with_double_input():
    model = FeedbackFormer(small("lite"))
    a, b = profile(model, 64), profile(model, 128)
    for ra, rb in zip(a.rows, b.rows):
        if ra.name.endswith("embed") or "decoder" in ra.name or ra.name == "feedback":
            assert rb.macs == 4 * ra.macs, ra.name


def test_bias_and_norm_flags_only_add():
    model = FeedbackFormer(small("lite"))
    base = profile(model, 64).total_macs
    assert profile(model, 64, Convention(include_bias=True)).total_macs > base
    assert profile(model, 64, Convention(include_norm=True)).total_macs > base


def test_feedback_macs_hand_count():
    model = FeedbackFormer(small("lite"))
    # 16x16 grid, 16 input channels: dw 16*9, pw1 16*8, pw2 8*8 per pixel
    assert feedback_macs(model.feedback, 16, 16) == 256 * (16 * 9 + 16 * 8 + 8 * 8)


def test_identity_two_pass_plus_module():
    model = FeedbackFormer(small("lite"))
    single = profile(FeedbackFormer(small("none")), 64)
    double = profile(model, 64)
    fb_params, fb_macs = double.subtotal("feedback")
    assert double.total_macs == 2 * single.total_macs + fb_macs
    assert double.per_pass_total_params == 2 * single.unique_params + fb_params


def test_report_header_flags_resolution():
    text = profile(FeedbackFormer(small("none")), 64).to_table()
    assert "3x64x64" in text and "assumed" in text
    assert "unique params" in text and "per-pass params" in text
