import json

import numpy as np
import pytest
from PIL import Image

from fbformer.cli import main
from fbformer.errors import DataError
from fbformer.render import HEADER, panel_origin, render_predictions

PALETTE = [(255, 255, 255), (0, 0, 0), (200, 30, 30)]
TINY = """
seed = 0
[encoder]
variant = "custom"
dims = [4, 4, 8, 8]
depths = [1, 1, 1, 1]
heads = [1, 2, 2, 2]
mlp_ratio = 2.0
[decoder]
channels = 4
[model]
num_classes = 2
[feedback]
hidden = 4
attn_downsample = 2
[train]
epochs = 1
eval_every = 1
[data]
tile = 32
protocol = "none"
"""


# --- rendering ----------------------------------------------------------------

def maps(n, seed=0, size=8):
    rng = np.random.default_rng(seed)
    return [rng.integers(0, 3, (size, size)) for _ in range(n)]


def test_grid_layout_and_palette(tmp_path):
    gt = maps(2)
    gt[0][0, 0] = 0
    imgs = [np.zeros((8, 8), np.uint8)] * 2
    path = render_predictions(imgs, gt, {"a": maps(2, 1), "b": maps(2, 2), "c": maps(2, 3)}, PALETTE,
                              tmp_path / "g.png")
    grid = np.asarray(Image.open(path))
    assert grid.shape[1] == 5 * 8 + 4 * 2 and grid.shape[0] == HEADER + 2 * 8 + 2
    x, y = panel_origin(0, 1, 8, 8)
    assert tuple(grid[y, x]) == PALETTE[0]


def test_render_is_byte_deterministic(tmp_path):
    args = ([np.ones((8, 8))] * 2, maps(2), {"pred": maps(2, 5)}, PALETTE)
    a = render_predictions(*args, tmp_path / "a.png").read_bytes()
    b = render_predictions(*args, tmp_path / "b.png").read_bytes()
    assert a == b


def test_render_palette_missing_class(tmp_path):
    with pytest.raises(DataError, match="palette"):
        render_predictions([np.zeros((8, 8))], maps(1), {}, PALETTE[:2], tmp_path / "x.png")


def test_render_size_mismatch(tmp_path):
    with pytest.raises(DataError):
        render_predictions([np.zeros((8, 8))], maps(1), {"p": maps(1, size=4)}, PALETTE, tmp_path / "x.png")


# --- command line -------------------------------------------------------------

def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_no_arguments_prints_usage(capsys):
    assert main([]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_command(capsys):
    assert main(["frobnicate"]) == 1
    assert "usage" in capsys.readouterr().err


def test_profile_command(tmp_path, capsys):
    cfg = tmp_path / "s12.toml"
    cfg.write_text('[encoder]\nvariant = "S12"\n[feedback]\nmode = "none"\n')
    assert main(["profile", "--config", str(cfg), "--input", "256", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "per-pass params" in out and "3x256x256" in out
    assert (tmp_path / "profile.csv").read_text().startswith("module,params,macs,passes")
    m = manifest(tmp_path)
    assert m["status"] == 0 and m["config_digest"] and set(m["artifacts"]) == {"csv", "table"}


def test_bad_config_exits_one(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[encoder]\nwidth = 3\n")
    assert main(["profile", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "unknown config keys" in manifest(tmp_path)["error"]
    assert main(["profile", "--config", str(tmp_path / "missing.toml"), "--out", str(tmp_path)]) == 1


def test_indivisible_input_is_config_error(tmp_path):
    assert main(["profile", "--input", "100", "--out", str(tmp_path)]) == 1


def test_digest_changes_with_config(tmp_path):
    cfg = tmp_path / "c.toml"
    digests = []
    for channels in (128, 64, 64):
        cfg.write_text(f"[decoder]\nchannels = {channels}\n")
        main(["profile", "--config", str(cfg), "--input", "64", "--out", str(tmp_path)])
        digests.append(manifest(tmp_path)["config_digest"])
    assert digests[0] != digests[1] and digests[1] == digests[2]


def test_synth_train_eval_predict(tmp_path, capsys):
    data, run = tmp_path / "data", tmp_path / "run"
    assert main(["synth", "--out", str(data), "--seed", "3", "--count", "3", "--size", "32"]) == 0
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(TINY)
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)]) == 0
    assert (run / "best.ckpt").exists() and (run / "train_log.jsonl").exists()
    assert manifest(run)["artifacts"]["checkpoint"].endswith("best.ckpt")
    ev = tmp_path / "eval"
    args = ["eval", "--checkpoint", str(run / "best.ckpt"), "--data", str(data), "--split", "all", "--out", str(ev)]
    assert main(args + ["--render", "2"]) == 0
    first = json.loads((ev / "metrics.json").read_text())
    assert first["class_names"] == ["membrane", "background"]
    assert main(args) == 0
    assert json.loads((ev / "metrics.json").read_text()) == first
    assert (ev / "predictions.png").exists()
    pred = tmp_path / "pred"
    image = data / "images" / "cell_0000.png"
    assert main(["predict", "--checkpoint", str(run / "best.ckpt"), str(image), "--out", str(pred)]) == 0
    out = np.asarray(Image.open(pred / "cell_0000_pred.png"))
    assert out.shape == (32, 32, 3)


def test_train_class_mismatch_and_missing_data(tmp_path):
    data = tmp_path / "data"
    main(["synth", "--out", str(data), "--count", "1", "--size", "32", "--classes", "5"])
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(TINY)
    assert main(["train", "--config", str(cfg), "--data", str(data), "--out", str(tmp_path / "r")]) == 1
    assert main(["train", "--config", str(cfg), "--data", str(tmp_path / "nothing"),
                 "--out", str(tmp_path / "r2")]) == 2


def test_predict_unreadable_image_is_data_error(tmp_path):
    data, run = tmp_path / "data", tmp_path / "run"
    main(["synth", "--out", str(data), "--count", "1", "--size", "32"])
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(TINY)
    main(["train", "--config", str(cfg), "--data", str(data), "--out", str(run)])
    bogus = tmp_path / "bogus.png"
    bogus.write_text("nope")
    assert main(["predict", "--checkpoint", str(run / "best.ckpt"), str(bogus), "--out", str(tmp_path)]) == 2


def test_gradcheck_rejects_unknown_size(tmp_path):
    assert main(["gradcheck", "--size", "huge", "--out", str(tmp_path)]) == 1
