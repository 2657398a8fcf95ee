import json
import math

import numpy as np
import pytest

from fbformer.config import ExperimentConfig, TrainConfig
from fbformer.data import SyntheticCellConfig, synth_sample, tile_image, to_model_input
from fbformer.errors import ConfigError, DataError
from fbformer.feedback import FeedbackFormer
from fbformer.gradcheck import tiny_config
from fbformer.tensor import Parameter, backward
from fbformer.train import (Adam, Checkpoint, cosine_lr, evaluate, fit, load_checkpoint, save_checkpoint,
                            training_loss)
from fbformer import ops


def tiles(n=4, size=32, seed=0):
    cfg = SyntheticCellConfig(seed=seed, size=size)
    out = []
    for i in range(n):
        im, lb = synth_sample(cfg, i)
        out += tile_image(to_model_input(im), lb.astype(np.int64), size, f"s{i}")
    return out


def tiny_fit(epochs=2, seed=0, log_path=None, **kw):
    model = FeedbackFormer(tiny_config(), seed=seed)
    cfg = TrainConfig(epochs=epochs, batch_size=2, eval_every=1, seed=seed, **kw)
    data = tiles()
    return fit(model, data, data[:2], cfg, log_path=log_path)


# --- schedule -----------------------------------------------------------------

def test_cosine_values():
    assert cosine_lr(0, 500, 1e-3) == 1e-3
    assert cosine_lr(500, 500, 1e-3) == 0.0
    assert cosine_lr(250, 500, 1e-3) == pytest.approx(5e-4, abs=1e-15)
    with pytest.raises(ValueError):
        cosine_lr(501, 500, 1e-3)


def test_cosine_monotone():
    lrs = [cosine_lr(e, 40, 1.0) for e in range(41)]
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


# --- Adam ---------------------------------------------------------------------

def test_adam_first_step_is_lr_sign():
    p = Parameter(np.array([1.0, -2.0, 3.0]))
    p.grad = np.array([0.5, -4.0, 1e3])
    Adam([p]).step(0.01)
    np.testing.assert_allclose(p.data, [1.0 - 0.01, -2.0 + 0.01, 3.0 - 0.01], rtol=1e-7)


def test_adam_zero_gradient():
    p = Parameter(np.array([1.0]))
    opt = Adam([p])
    p.grad = np.array([1.0])
    opt.step(0.1)
    before, m = p.data.copy(), opt.m[id(p)].copy()
    p.grad = np.zeros(1)
    opt.step(0.1)
    np.testing.assert_allclose(opt.m[id(p)], 0.9 * m)
    # the decayed first moment still moves the parameter; a zero-moment state would not
    q = Parameter(np.array([1.0]))
    q.grad = np.zeros(1)
    Adam([q]).step(0.1)
    assert q.data[0] == 1.0 and before[0] != p.data[0]


def test_adam_matches_hand_recurrence_on_quadratic():
    # f(x) = (x - 3)^2, three steps
    x0, lr, b1, b2, eps = 0.5, 0.1, 0.9, 0.999, 1e-8
    p = Parameter(np.array([x0]))
    opt = Adam([p])
    x, m, v = x0, 0.0, 0.0
    for t in range(1, 4):
        opt.zero_grad()
        backward(ops.sum((p - 3.0) * (p - 3.0)))
        opt.step(lr)
        g = 2 * (x - 3)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
        assert p.data[0] == pytest.approx(x, abs=1e-10)


def test_adam_nan_names_parameter():
    p = Parameter(np.array([1.0]), name="decoder.classifier.weight")
    p.grad = np.array([np.nan])
    with pytest.raises(FloatingPointError, match="decoder.classifier.weight"):
        Adam([p]).step(0.1)


def test_adam_skips_frozen():
    p = Parameter(np.array([1.0]), trainable=False)
    assert Adam([p]).params == []


# --- fit ----------------------------------------------------------------------

def test_fit_log_records(tmp_path):
    log = tmp_path / "log.jsonl"
    res = tiny_fit(epochs=2, log_path=log)
    lines = [json.loads(l) for l in log.read_text().splitlines()]
    assert lines == res.log
    steps = [r for r in lines if r["kind"] == "step"]
    epochs = [r for r in lines if r["kind"] == "epoch"]
    assert len(steps) == 4 and [s["step"] for s in steps] == [1, 2, 3, 4]
    assert [e["lr"] for e in epochs] == [cosine_lr(0, 2, 1e-3), cosine_lr(1, 2, 1e-3)]
    assert all("val_miou" in e for e in epochs)
    assert res.checkpoint.best_miou == max(e["val_miou"] for e in epochs)


def test_fit_is_reproducible():
    a, b = tiny_fit(seed=3), tiny_fit(seed=3)
    assert a.log == b.log
    for k in a.checkpoint.params:
        assert np.array_equal(a.checkpoint.params[k], b.checkpoint.params[k])
    assert tiny_fit(seed=4).log != a.log


def test_fit_restores_best_weights():
    res = tiny_fit(epochs=3)
    state = res.model.state_dict()
    assert all(np.array_equal(state[k], v) for k, v in res.checkpoint.params.items())


def test_fit_errors():
    model = FeedbackFormer(tiny_config())
    with pytest.raises(DataError):
        fit(model, [], [], TrainConfig(epochs=1))
    with pytest.raises(ConfigError):
        fit(model, tiles(), [], TrainConfig(epochs=0))


def test_second_round_only_objective():
    cfg = tiny_config()
    cfg.feedback.both_rounds = False
    model = FeedbackFormer(cfg)
    data = tiles(2)
    images = np.stack([t.image for t in data])
    labels = np.stack([t.label for t in data])
    model.train()
    only2, out = training_loss(model, images, labels, TrainConfig().loss)
    from fbformer.losses import round_loss
    assert only2.item() == pytest.approx(round_loss(out.logits2, out.aux2, labels, TrainConfig().loss).item())


# --- evaluation and checkpoints -----------------------------------------------

def test_evaluate_deterministic_and_class_mismatch():
    model = FeedbackFormer(tiny_config())
    data = tiles()
    a, b = evaluate(model, data, ["membrane", "background"]), evaluate(model, data, ["membrane", "background"])
    assert a.miou == b.miou and np.array_equal(a.confusion.counts, b.confusion.counts)
    assert a.confusion.total == 4 * 32 * 32
    assert a.table().split("\n")[0].split() == ["Method", "membrane", "background", "mIoU"]
    with pytest.raises(ConfigError):
        evaluate(model, data, ["a", "b", "c"])


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    res = tiny_fit(epochs=1)
    exp = ExperimentConfig(model=tiny_config())
    ckpt = Checkpoint(res.checkpoint.params, exp.to_dict(), 0, 0.5, {"seed": 0})
    path = tmp_path / "m.ckpt"
    save_checkpoint(ckpt, path)
    back = load_checkpoint(path)
    assert back.epoch == 0 and back.best_miou == 0.5 and back.config == ckpt.config
    for k, v in ckpt.params.items():
        assert back.params[k].dtype == v.dtype and np.array_equal(back.params[k], v)
    data = tiles()
    before = evaluate(res.model, data)
    after = evaluate(back.build_model(), data)
    assert before.miou == after.miou and np.array_equal(before.confusion.counts, after.confusion.counts)
    images = np.stack([t.image for t in data])
    np.testing.assert_array_equal(res.model.eval()(images).logits2.data, back.build_model().eval()(images).logits2.data)
    save_checkpoint(back, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"not a checkpoint")
    with pytest.raises(DataError, match="magic"):
        load_checkpoint(path)
    exp = ExperimentConfig(model=tiny_config())
    save_checkpoint(Checkpoint({"a": np.zeros(2, np.float32)}, exp.to_dict(), 0, 0.0), path)
    raw = bytearray(path.read_bytes())
    raw[12] ^= 0xFF  # inside the config digest
    path.write_bytes(bytes(raw))
    with pytest.raises(DataError, match="digest"):
        load_checkpoint(path)
