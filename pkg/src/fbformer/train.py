"""Optimizer, learning-rate schedule, training loop, evaluation and checkpoints."""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import ExperimentConfig, LossConfig, TrainConfig, config_from_mapping
from .data import SampleTile, augment
from .errors import ConfigError, DataError
from .feedback import FeedbackFormer
from .losses import ConfusionMatrix, format_iou_table, round_loss, total_loss
from .tensor import Parameter, Rng, backward


def cosine_lr(epoch: int, epochs: int, lr0: float) -> float:
    """``0.5 * lr0 * (1 + cos(pi * epoch / epochs))``, never below 0."""
    if not 0 <= epoch <= epochs:
        raise ValueError(f"epoch {epoch} outside [0, {epochs}]")
    return max(0.0, 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / epochs)))


class Adam:
    """Bias-corrected Adam keyed by parameter name."""

    def __init__(self, params: Sequence[Parameter], beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = [p for p in params if p.trainable]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m: Dict[int, np.ndarray] = {id(p): np.zeros_like(p.data) for p in self.params}
        self.v: Dict[int, np.ndarray] = {id(p): np.zeros_like(p.data) for p in self.params}

    def step(self, lr: float) -> None:
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                raise FloatingPointError(f"non-finite gradient in parameter {p.name or '<unnamed>'}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in self.params:
            m, v = self.m[id(p)], self.v[id(p)]
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.data.dtype, copy=False)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# checkpoints ----------------------------------------------------------------

MAGIC = b"FBFCKPT\0"
VERSION = 1
_DTYPES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


@dataclass
class Checkpoint:
    params: Dict[str, np.ndarray]
    config: Dict
    epoch: int
    best_miou: float
    rng_state: Dict = field(default_factory=dict)

    def config_digest(self) -> bytes:
        blob = json.dumps(self.config, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).digest()

    def experiment(self) -> ExperimentConfig:
        return experiment_from_dict(self.config)

    def build_model(self) -> FeedbackFormer:
        model = FeedbackFormer(self.experiment().model)
        first = next(iter(self.params.values()))
        model.astype(first.dtype)
        model.load_state_dict(self.params)
        return model


def experiment_from_dict(d: Dict) -> ExperimentConfig:
    m, t = d["model"], d["train"]
    flat = {
        "encoder.variant": m["encoder"]["variant"], "encoder.dims": m["encoder"]["dims"],
        "encoder.depths": m["encoder"]["depths"], "encoder.heads": m["encoder"]["heads"],
        "encoder.mlp_ratio": m["encoder"]["mlp_ratio"],
        "decoder.channels": m["decoder"]["channels"], "decoder.topdown": m["decoder"]["topdown"],
        "model.num_classes": m["decoder"]["num_classes"],
        **{f"feedback.{k}": v for k, v in m["feedback"].items()},
        **{f"loss.{k}": v for k, v in t["loss"].items()},
        **{f"train.{k}": t[k] for k in ("epochs", "batch_size", "lr", "eval_every", "augment")},
        "data.tile": d["data"]["tile"], "data.protocol": d["data"]["protocol"], "data.fold": d["data"]["fold"],
        "seed": d["seed"],
    }
    if d["data"].get("root") is not None:
        flat["data.root"] = d["data"]["root"]
    cfg = config_from_mapping(flat)
    # patch geometry is not part of the flat key set
    for key in ("patch_kernel", "patch_stride", "patch_padding"):
        setattr(cfg.model.encoder, key, list(m["encoder"][key]))
    return cfg


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Binary layout (little-endian)::

        magic[8] version:u32 digest[32] meta_len:u32 meta_json n_tensors:u32
        per tensor: name_len:u16 name dtype:u8 ndim:u8 shape:u32*ndim payload
    """
    meta = json.dumps({"config": ckpt.config, "epoch": ckpt.epoch, "best_miou": ckpt.best_miou,
                       "rng_state": ckpt.rng_state}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(ckpt.config_digest())
    buf.write(struct.pack("<I", len(meta)))
    buf.write(meta)
    buf.write(struct.pack("<I", len(ckpt.params)))
    for name, arr in ckpt.params.items():
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        if le.dtype not in _DTYPES:
            raise ConfigError(f"{name}: unsupported checkpoint dtype {arr.dtype}")
        raw = name.encode()
        buf.write(struct.pack("<HBB", len(raw), _DTYPES[le.dtype], le.ndim))
        buf.write(raw)
        buf.write(struct.pack(f"<{le.ndim}I", *le.shape))
        buf.write(np.ascontiguousarray(le).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    view = memoryview(data)
    if data[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    pos = 8
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    digest = bytes(view[pos:pos + 32])
    pos += 32
    (meta_len,) = struct.unpack_from("<I", data, pos)
    pos += 4
    meta = json.loads(bytes(view[pos:pos + meta_len]))
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    params: Dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len, code, ndim = struct.unpack_from("<HBB", data, pos)
        pos += 4
        name = bytes(view[pos:pos + name_len]).decode()
        pos += name_len
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dtype = _DTYPE_CODES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        params[name] = np.frombuffer(data, dtype=dtype, count=nbytes // dtype.itemsize, offset=pos).reshape(shape).copy()
        pos += nbytes
    ckpt = Checkpoint(params, meta["config"], meta["epoch"], meta["best_miou"], meta.get("rng_state", {}))
    if ckpt.config_digest() != digest:
        raise DataError(f"{path}: config digest mismatch (corrupt file?)")
    return ckpt


# training -------------------------------------------------------------------

def batch_arrays(tiles: Sequence[SampleTile], dtype) -> tuple:
    images = np.stack([t.image for t in tiles]).astype(dtype, copy=False)
    labels = np.stack([t.label for t in tiles]).astype(np.int64, copy=False)
    return images, labels


def training_loss(model: FeedbackFormer, images: np.ndarray, labels: np.ndarray, cfg: LossConfig):
    """Composite objective for one batch; returns ``(loss, output)``."""
    out = model(images)
    second = round_loss(out.logits2, out.aux2, labels, cfg)
    if out.state is None:
        return second, out
    if not model.config.feedback.both_rounds:
        return second, out
    first = round_loss(out.logits1, out.aux1, labels, cfg)
    return total_loss(first, second, cfg), out


@dataclass
class EvalReport:
    class_names: List[str]
    iou: np.ndarray
    miou: float
    confusion: ConfusionMatrix

    def table(self, method: str = "model") -> str:
        return format_iou_table(self.class_names, {method: (self.iou, self.miou)})

    def to_dict(self) -> Dict:
        return {"class_names": self.class_names, "iou": [None if np.isnan(v) else float(v) for v in self.iou],
                "miou": self.miou, "confusion": self.confusion.counts.tolist()}


def evaluate(model: FeedbackFormer, tiles: Sequence[SampleTile], class_names: Optional[Sequence[str]] = None,
             batch_size: int = 4) -> EvalReport:
    """Dataset-wide IoU from the final-round arg-max."""
    n = model.num_classes
    names = list(class_names) if class_names is not None else [f"class{i}" for i in range(n)]
    if len(names) != n:
        raise ConfigError(f"model predicts {n} classes but the dataset defines {len(names)}")
    cm = ConfusionMatrix(n)
    dtype = model.parameters()[0].data.dtype
    for start in range(0, len(tiles), batch_size):
        images, labels = batch_arrays(tiles[start:start + batch_size], dtype)
        cm.update(model.predict(images), labels)
    return EvalReport(names, cm.iou(), cm.miou(), cm)


@dataclass
class FitResult:
    checkpoint: Checkpoint
    log: List[Dict]
    model: FeedbackFormer


def fit(model: FeedbackFormer, train: Sequence[SampleTile], val: Sequence[SampleTile], cfg: TrainConfig,
        experiment: Optional[ExperimentConfig] = None, log_path=None, class_names=None,
        on_epoch=None) -> FitResult:
    """Train with Adam + per-epoch cosine lr and keep the best-validation-mIoU weights.

    The log holds one ``{"kind": "step"}`` record per optimizer step and one
    ``{"kind": "epoch"}`` record per epoch (with ``val_miou`` on eval epochs).
    """
    cfg.validate()
    if not train:
        raise DataError("training split is empty")
    experiment = experiment or ExperimentConfig(model=model.config, train=cfg)
    rng = Rng(cfg.seed).child(7)
    opt = Adam(model.parameters())
    dtype = model.parameters()[0].data.dtype
    log: List[Dict] = []
    sink = open(log_path, "w") if log_path else None
    best_miou, best_epoch, best_state = -1.0, -1, None
    eval_set = val if val else train
    step = 0
    try:
        for epoch in range(cfg.epochs):
            lr = cosine_lr(epoch, cfg.epochs, cfg.lr)
            model.train()
            order = rng.child(epoch).permutation(len(train))
            epoch_loss = 0.0
            n_batches = 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                batch = [train[i] for i in idx]
                if cfg.augment:
                    batch = [augment(t, rng.child(epoch, 1, int(i))) for t, i in zip(batch, idx)]
                images, labels = batch_arrays(batch, dtype)
                opt.zero_grad()
                try:
                    loss, _ = training_loss(model, images, labels, cfg.loss)
                except DataError as exc:
                    raise DataError(f"batch with samples {[t.id for t in batch]}: {exc}") from exc
                backward(loss)
                opt.step(lr)
                value = float(loss.item())
                epoch_loss += value
                n_batches += 1
                step += 1
                _emit(log, sink, {"kind": "step", "epoch": epoch, "step": step, "lr": lr, "loss": value})
            record = {"kind": "epoch", "epoch": epoch, "lr": lr, "loss": epoch_loss / n_batches}
            if (epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs:
                report = evaluate(model, eval_set, class_names)
                record["val_miou"] = report.miou
                if report.miou > best_miou:
                    best_miou, best_epoch, best_state = report.miou, epoch, model.state_dict()
            _emit(log, sink, record)
            if on_epoch is not None:
                on_epoch(record)
    finally:
        if sink:
            sink.close()
    model.load_state_dict(best_state)
    ckpt = Checkpoint(best_state, experiment.to_dict(), best_epoch, best_miou, {"seed": cfg.seed, "steps": step})
    return FitResult(ckpt, log, model)


def _emit(log: List[Dict], sink, record: Dict) -> None:
    log.append(record)
    if sink:
        sink.write(json.dumps(record) + "\n")
        sink.flush()
