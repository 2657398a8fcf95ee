"""Palette rendering of label maps into a comparison grid PNG."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import DataError

HEADER = 14
GAP = 2


def colorize(label: np.ndarray, palette: Sequence[Sequence[int]]) -> np.ndarray:
    label = np.asarray(label)
    if label.size and label.max() >= len(palette):
        raise DataError(f"palette has {len(palette)} colours but the map contains class {int(label.max())}")
    return np.asarray(palette, dtype=np.uint8)[label]


def _as_rgb(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.ndim == 3 and image.shape[0] in (1, 3):
        image = np.moveaxis(image, 0, -1)
    if image.dtype != np.uint8:
        lo, hi = float(image.min()), float(image.max())
        image = np.zeros(image.shape, np.uint8) if hi <= lo else np.round(255 * (image - lo) / (hi - lo)).astype(np.uint8)
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=-1)
    if image.shape[-1] == 1:
        image = np.repeat(image, 3, axis=-1)
    return image


def render_predictions(images: Sequence[np.ndarray], gt: Sequence[np.ndarray],
                       pred_sets: Dict[str, Sequence[np.ndarray]], palette: Sequence[Sequence[int]],
                       path) -> Path:
    """Grid with one row per sample: input, ground truth, then one column per prediction set."""
    columns = ["input", "ground truth", *pred_sets]
    h, w = np.asarray(gt[0]).shape
    for name, preds in pred_sets.items():
        if len(preds) != len(images):
            raise DataError(f"prediction set {name!r} has {len(preds)} maps for {len(images)} images")
    rows = len(images)
    canvas = Image.new("RGB", (len(columns) * (w + GAP) - GAP, HEADER + rows * (h + GAP) - GAP), (255, 255, 255))
    draw = ImageDraw.Draw(canvas)
    for c, title in enumerate(columns):
        draw.text((c * (w + GAP) + 1, 1), title[: max(1, w // 6)], fill=(0, 0, 0))
    for r in range(rows):
        panels = [_as_rgb(images[r]), colorize(gt[r], palette)]
        panels += [colorize(preds[r], palette) for preds in pred_sets.values()]
        for c, panel in enumerate(panels):
            if panel.shape[:2] != (h, w):
                raise DataError(f"panel ({r}, {columns[c]}) has size {panel.shape[:2]}, expected {(h, w)}")
            canvas.paste(Image.fromarray(panel), (c * (w + GAP), HEADER + r * (h + GAP)))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    canvas.save(path, format="PNG")
    return path


def panel_origin(row: int, col: int, h: int, w: int) -> tuple:
    """Top-left (x, y) of a panel in the grid produced by :func:`render_predictions`."""
    return col * (w + GAP), HEADER + row * (h + GAP)
