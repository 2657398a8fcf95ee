"""Command-line entry point: ``fbformer <command> [options]``.

Commands: synth, train, eval, predict, profile, gradcheck. Every command
writes one ``manifest.json`` into ``--out``. Exit status is 0 on success,
1 for configuration or usage errors and 2 for data errors.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image

from . import __version__
from .config import ExperimentConfig, load_config
from .data import (DEFAULT_PALETTE, SyntheticCellConfig, build_folds, generate_synthetic, load_dataset, load_tiles,
                   to_model_input)
from .errors import ConfigError, DataError, ShapeError
from .feedback import FeedbackFormer
from .gradcheck import TOLERANCE, model_gradcheck, tiny_config
from .profile import Convention, profile
from .render import colorize, render_predictions
from .train import evaluate, fit, load_checkpoint, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 1, 2


@dataclass
class RunManifest:
    command: str
    config_digest: Optional[str]
    seed: Optional[int]
    artifacts: Dict[str, str] = field(default_factory=dict)
    wall_clock: float = 0.0
    tool_version: str = __version__
    status: int = EXIT_OK
    error: Optional[str] = None

    def write(self, out: Path) -> Path:
        out.mkdir(parents=True, exist_ok=True)
        path = out / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; usage errors here map to 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _experiment(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.seed = cfg.train.seed = args.seed
    return cfg


def _splits(cfg: ExperimentConfig, stems: Sequence[str]) -> Dict[str, List[str]]:
    protocol = cfg.data.protocol
    if protocol == "none":
        return {"train": list(stems), "val": list(stems), "test": list(stems)}
    plan = build_folds(stems, protocol, seed=cfg.seed)
    if not 0 <= cfg.data.fold < plan.fold_count:
        raise ConfigError(f"data.fold {cfg.data.fold} outside [0, {plan.fold_count})")
    fold = plan.folds[cfg.data.fold]
    return {"train": fold.train, "val": fold.val, "test": fold.test}


def _dataset(cfg: ExperimentConfig, override: Optional[str]):
    root = override or cfg.data.root
    if root is None:
        raise ConfigError("no dataset: set data.root in the config or pass --data")
    return load_dataset(root)


def cmd_synth(args, manifest: RunManifest) -> None:
    cfg = SyntheticCellConfig(seed=args.seed or 0, size=args.size, count=args.count, classes=args.classes,
                              thickness=args.thickness)
    manifest.seed = cfg.seed
    spec = generate_synthetic(cfg, args.out)
    manifest.artifacts["dataset"] = str(spec.root)
    print(f"wrote {len(spec.stems)} samples ({cfg.size}x{cfg.size}, {cfg.classes} classes) to {spec.root}")


def cmd_train(args, manifest: RunManifest) -> None:
    cfg = _experiment(args)
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    manifest.config_digest, manifest.seed = cfg.digest(), cfg.seed
    spec = _dataset(cfg, args.data)
    if spec.class_count != cfg.model.num_classes:
        raise ConfigError(f"model.num_classes={cfg.model.num_classes} but {spec.root} defines "
                          f"{spec.class_count} classes")
    splits = _splits(cfg, spec.stems)
    tiles = {k: load_tiles(spec, cfg.data.tile, v) for k, v in splits.items()}
    model = FeedbackFormer(cfg.model, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"

    def progress(record):
        if "val_miou" in record:
            print(f"epoch {record['epoch'] + 1}/{cfg.train.epochs} loss {record['loss']:.4f} "
                  f"val mIoU {record['val_miou']:.4f}", flush=True)

    result = fit(model, tiles["train"], tiles["val"], cfg.train, experiment=cfg, log_path=log_path,
                 class_names=spec.class_names, on_epoch=progress)
    ckpt_path = out / "best.ckpt"
    save_checkpoint(result.checkpoint, ckpt_path)
    report = evaluate(result.model, tiles["test"], spec.class_names)
    (out / "test_metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    print(report.table("test"))
    manifest.artifacts.update(checkpoint=str(ckpt_path), log=str(log_path), metrics=str(out / "test_metrics.json"))


def cmd_eval(args, manifest: RunManifest) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.experiment()
    manifest.config_digest, manifest.seed = cfg.digest(), cfg.seed
    spec = _dataset(cfg, args.data)
    stems = spec.stems if args.split == "all" else _splits(cfg, spec.stems)[args.split]
    tiles = load_tiles(spec, cfg.data.tile, stems)
    model = ckpt.build_model()
    report = evaluate(model, tiles, spec.class_names)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    manifest.artifacts["metrics"] = str(out / "metrics.json")
    print(report.table(args.split))
    if args.render:
        chosen = tiles[:args.render]
        preds = [model.predict(t.image[None])[0] for t in chosen]
        path = render_predictions([t.image for t in chosen], [t.label for t in chosen],
                                  {"prediction": preds}, spec.palette, out / "predictions.png")
        manifest.artifacts["render"] = str(path)


def _pad_to(image: np.ndarray, multiple: int) -> np.ndarray:
    h, w = image.shape[-2:]
    ph, pw = -h % multiple, -w % multiple
    return np.pad(image, ((0, 0), (0, ph), (0, pw)), mode="reflect") if ph or pw else image


def cmd_predict(args, manifest: RunManifest) -> None:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = ckpt.experiment()
    manifest.config_digest, manifest.seed = cfg.digest(), cfg.seed
    model = ckpt.build_model()
    palette = DEFAULT_PALETTE
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        try:
            image = np.asarray(Image.open(path))
        except (FileNotFoundError, OSError) as exc:
            raise DataError(f"cannot read {path}: {exc}") from exc
        x = to_model_input(image)
        h, w = x.shape[-2:]
        padded = _pad_to(x, cfg.model.encoder.reduction)
        pred = model.predict(padded[None].astype(model.parameters()[0].data.dtype))[0, :h, :w]
        target = out / f"{Path(path).stem}_pred.png"
        Image.fromarray(colorize(pred, palette)).save(target)
        manifest.artifacts[Path(path).stem] = str(target)
        print(f"{path} -> {target}")


def cmd_profile(args, manifest: RunManifest) -> None:
    cfg = _experiment(args)
    manifest.config_digest, manifest.seed = cfg.digest(), cfg.seed
    convention = Convention(per_pass=not args.unique, include_bias=args.include_bias,
                            include_norm=args.include_norm, attention_products=args.attention_products)
    model = FeedbackFormer(cfg.model, seed=cfg.seed)
    report = profile(model, (args.input, args.input), convention)
    print(report.to_table())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "profile.csv").write_text(report.to_csv())
    (out / "profile.txt").write_text(report.to_table() + "\n")
    manifest.artifacts.update(csv=str(out / "profile.csv"), table=str(out / "profile.txt"))


def cmd_gradcheck(args, manifest: RunManifest) -> None:
    if args.size != "tiny":
        raise ConfigError(f"unsupported gradcheck size {args.size!r}; only 'tiny' is available")
    seed = args.seed or 0
    manifest.seed = seed
    report = model_gradcheck(tiny_config(args.mode), seed=seed)
    print(f"parameters checked: {len(report.errors)}")
    print(f"max rel. err: {report.max_error:.3e} ({report.worst})")
    passed = report.passed()
    print("PASS" if passed else "FAIL", f"(tolerance {TOLERANCE:g})")
    if not passed:
        manifest.status = EXIT_CONFIG
        manifest.error = f"max relative error {report.max_error:.3e} >= {TOLERANCE:g}"


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "profile": cmd_profile, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")

    parser = _Parser(prog="fbformer", description="Feedback Former segmentation toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cell dataset")
    p.add_argument("--count", type=int, default=20)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, choices=(2, 5), default=2)
    p.add_argument("--thickness", type=float, default=3.0, help="membrane thickness in pixels")

    p = sub.add_parser("train", parents=[common], help="train and save the best-validation checkpoint")
    p.add_argument("--data", help="dataset root (overrides data.root)")
    p.add_argument("--epochs", type=int, help="overrides train.epochs")

    p = sub.add_parser("eval", parents=[common], help="per-class IoU of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root (overrides data.root)")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--render", type=int, default=0, metavar="N", help="render the first N tiles")

    p = sub.add_parser("predict", parents=[common], help="palette-coloured predictions for images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")

    p = sub.add_parser("profile", parents=[common], help="parameter and MAC table")
    p.add_argument("--input", type=int, default=256, help="square input size")
    p.add_argument("--unique", action="store_true", help="count shared weights once")
    p.add_argument("--include-bias", action="store_true")
    p.add_argument("--include-norm", action="store_true")
    p.add_argument("--attention-products", action="store_true", help="count QK^T and AV products")

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of a tiny model")
    p.add_argument("--size", default="tiny")
    p.add_argument("--mode", default="lite", choices=("none", "lite", "attn_self", "attn_st"))
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    manifest = RunManifest(command=" ".join(argv), config_digest=None, seed=args.seed)
    start = time.perf_counter()
    try:
        COMMANDS[args.command](args, manifest)
    except (ConfigError, ShapeError) as exc:
        manifest.status, manifest.error = EXIT_CONFIG, str(exc)
    except DataError as exc:
        manifest.status, manifest.error = EXIT_DATA, str(exc)
    manifest.wall_clock = time.perf_counter() - start
    if manifest.error:
        print(f"error: {manifest.error}", file=sys.stderr)
    manifest.write(Path(args.out))
    return manifest.status


if __name__ == "__main__":
    sys.exit(main())
