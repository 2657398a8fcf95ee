"""Dataset layout, tiling, cross-validation folds, augmentation and synthetic cells.

On-disk layout::

    root/dataset.toml        class names + palette
    root/images/<stem>.png   8-bit grayscale or RGB
    root/labels/<stem>.png   8-bit single channel, pixel value = class index
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import tomli
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError
from .tensor import Rng

TWO_CLASS_NAMES = ["membrane", "background"]
FIVE_CLASS_NAMES = ["membrane", "mitochondria", "synapse", "glia/extracellular", "intracellular"]
DEFAULT_PALETTE = [(255, 255, 255), (0, 0, 0), (230, 60, 60), (60, 160, 230), (120, 200, 90),
                   (240, 200, 60), (170, 90, 200), (90, 90, 90)]
IMAGE_MEAN, IMAGE_STD = 0.5, 0.25


@dataclass
class DatasetSpec:
    root: Path
    class_names: List[str]
    palette: List[Tuple[int, int, int]]
    stems: List[str] = field(default_factory=list)

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    def image_path(self, stem: str) -> Path:
        return self.root / "images" / f"{stem}.png"

    def label_path(self, stem: str) -> Path:
        return self.root / "labels" / f"{stem}.png"

    def load(self, stem: str) -> Tuple[np.ndarray, np.ndarray]:
        """Return ``(image uint8 HxW or HxWx3, label HxW)`` for one stem."""
        try:
            image = np.asarray(Image.open(self.image_path(stem)))
            label = np.asarray(Image.open(self.label_path(stem)))
        except FileNotFoundError as exc:
            raise DataError(f"{stem}: {exc}") from exc
        if label.ndim != 2:
            raise DataError(f"{stem}: label mask must be single channel, got shape {label.shape}")
        if image.shape[:2] != label.shape:
            raise DataError(f"{stem}: image {image.shape[:2]} and label {label.shape} sizes differ")
        if label.max(initial=0) >= self.class_count:
            raise DataError(f"{stem}: label value {label.max()} >= class count {self.class_count}")
        return image, label


def write_manifest(spec: DatasetSpec) -> None:
    names = ", ".join(f'"{n}"' for n in spec.class_names)
    palette = ", ".join(f"[{r}, {g}, {b}]" for r, g, b in spec.palette)
    text = f"class_names = [{names}]\npalette = [{palette}]\n"
    (spec.root / "dataset.toml").write_text(text)


def load_dataset(root) -> DatasetSpec:
    root = Path(root)
    manifest = root / "dataset.toml"
    if not manifest.exists():
        raise DataError(f"{root} has no dataset.toml manifest")
    with manifest.open("rb") as fh:
        meta = tomli.load(fh)
    names = list(meta["class_names"])
    palette = [tuple(c) for c in meta.get("palette", DEFAULT_PALETTE[:len(names)])]
    stems = sorted(p.stem for p in (root / "images").glob("*.png"))
    for stem in stems:
        if not (root / "labels" / f"{stem}.png").exists():
            raise DataError(f"image {stem}.png has no label mask")
    return DatasetSpec(root, names, palette, stems)


def to_model_input(image: np.ndarray) -> np.ndarray:
    """uint8 HxW or HxWx3 -> normalized float 3xHxW."""
    x = image.astype(np.float32) / 255.0
    if x.ndim == 2:
        x = np.repeat(x[None], 3, axis=0)
    else:
        x = np.moveaxis(x[..., :3], -1, 0)
    return (x - IMAGE_MEAN) / IMAGE_STD


# tiling ---------------------------------------------------------------------

@dataclass
class SampleTile:
    source: str
    origin: Tuple[int, int]  # (x, y) of the top-left pixel in the source
    size: int
    image: np.ndarray  # 3 x T x T float
    label: np.ndarray  # T x T int

    @property
    def id(self) -> str:
        return f"{self.source}@{self.origin[0]},{self.origin[1]}"


def tile_grid(height: int, width: int, tile: int) -> List[Tuple[int, int]]:
    """Row-major (x, y) origins of non-overlapping tiles covering the image."""
    if tile < 1 or height % tile or width % tile:
        raise DataError(f"{height}x{width} image is not divisible into {tile}x{tile} tiles; "
                        f"pad or crop it to a multiple of {tile} first")
    return [(x, y) for y in range(0, height, tile) for x in range(0, width, tile)]


def tile_image(image: np.ndarray, label: np.ndarray, tile: int, source: str = "image") -> List[SampleTile]:
    """Cut a (CxHxW or HxW) image and its HxW mask into row-major tiles."""
    if image.ndim == 2:
        image = image[None]
    h, w = label.shape
    if image.shape[-2:] != (h, w):
        raise DataError(f"{source}: image {image.shape[-2:]} and label {label.shape} differ")
    return [SampleTile(source, (x, y), tile, image[:, y:y + tile, x:x + tile].copy(),
                       label[y:y + tile, x:x + tile].copy())
            for x, y in tile_grid(h, w, tile)]


def stitch(tiles: Sequence[SampleTile], height: int, width: int) -> Tuple[np.ndarray, np.ndarray]:
    channels = tiles[0].image.shape[0]
    image = np.zeros((channels, height, width), tiles[0].image.dtype)
    label = np.zeros((height, width), tiles[0].label.dtype)
    for t in tiles:
        x, y = t.origin
        image[:, y:y + t.size, x:x + t.size] = t.image
        label[y:y + t.size, x:x + t.size] = t.label
    return image, label


# folds ----------------------------------------------------------------------

@dataclass
class Fold:
    train: List
    val: List
    test: List


@dataclass
class SplitPlan:
    protocol: str
    folds: List[Fold]

    @property
    def fold_count(self) -> int:
        return len(self.folds)


VAL_FRACTION = 0.1


def build_folds(ids: Sequence, protocol: str, seed: int = 0, groups: Optional[Sequence] = None) -> SplitPlan:
    """Cross-validation splits.

    ``drosophila-5fold``: ids are grouped (by source image when ``groups`` is
    given), the groups are shuffled into 5 equal parts, and fold k tests on
    part k, validates on part k+1 and trains on the other three.

    ``ratio-3fold``: ids are shuffled into 3 parts; fold k tests on part k and
    trains on the rest (2:1), with the last 10% of the shuffled training ids
    held out for validation.
    """
    ids = list(ids)
    rng = Rng(seed)
    if protocol == "drosophila-5fold":
        group_of = list(groups) if groups is not None else list(range(len(ids)))
        if len(group_of) != len(ids):
            raise DataError("groups must give one entry per id")
        unique = sorted(set(group_of), key=group_of.index)
        if len(unique) < 5 or len(unique) % 5:
            raise DataError(f"drosophila-5fold needs a multiple of 5 groups, got {len(unique)}")
        order = [unique[i] for i in rng.permutation(len(unique))]
        per = len(order) // 5
        parts = [set(order[i * per:(i + 1) * per]) for i in range(5)]
        members = [[i for i, g in zip(ids, group_of) if g in part] for part in parts]
        folds = []
        for k in range(5):
            val_k = (k + 1) % 5
            train = [i for j in range(5) if j not in (k, val_k) for i in members[j]]
            folds.append(Fold(train, list(members[val_k]), list(members[k])))
        return SplitPlan(protocol, folds)
    if protocol == "ratio-3fold":
        if len(ids) < 6:
            raise DataError(f"ratio-3fold needs at least 6 ids, got {len(ids)}")
        shuffled = [ids[i] for i in rng.permutation(len(ids))]
        parts = np.array_split(np.arange(len(shuffled)), 3)
        folds = []
        for k in range(3):
            test = [shuffled[i] for i in parts[k]]
            train = [shuffled[i] for j in range(3) if j != k for i in parts[j]]
            n_val = max(1, int(round(VAL_FRACTION * len(train))))
            folds.append(Fold(train[:-n_val], train[-n_val:], test))
        return SplitPlan(protocol, folds)
    raise ConfigError(f"unknown fold protocol {protocol!r}; expected drosophila-5fold or ratio-3fold")


# augmentation ---------------------------------------------------------------

def apply_transform(image: np.ndarray, label: np.ndarray, hflip: bool, vflip: bool, rot: int):
    """Flip then rotate by ``rot`` quarter turns (+1 = 90 deg counter-clockwise).

    For a T x T array, one counter-clockwise quarter turn maps
    ``out[i, j] = in[j, T - 1 - i]``.
    """
    if hflip:
        image, label = image[..., ::-1], label[..., ::-1]
    if vflip:
        image, label = image[..., ::-1, :], label[..., ::-1, :]
    if rot % 4:
        image = np.rot90(image, rot, axes=(-2, -1))
        label = np.rot90(label, rot, axes=(-2, -1))
    return np.ascontiguousarray(image), np.ascontiguousarray(label)


def draw_transform(rng: Rng) -> Tuple[bool, bool, int]:
    hflip = bool(rng.integers(0, 2))
    vflip = bool(rng.integers(0, 2))
    rot = int(rng.integers(-1, 2))
    return hflip, vflip, rot


def augment(tile: SampleTile, rng: Rng) -> SampleTile:
    """Random horizontal/vertical flips and a rotation in {-90, 0, +90} degrees."""
    if tile.image.shape[-1] != tile.image.shape[-2]:
        raise DataError(f"augmentation needs square tiles, got {tile.image.shape[-2:]}")
    image, label = apply_transform(tile.image, tile.label, *draw_transform(rng))
    return SampleTile(tile.source, tile.origin, tile.size, image, label)


# synthetic cells ------------------------------------------------------------

@dataclass
class SyntheticCellConfig:
    seed: int = 0
    size: int = 64
    count: int = 20
    classes: int = 2
    cells: Tuple[int, int] = (4, 8)
    thickness: float = 3.0
    noise: float = 0.05


def cell_partition(size: int, n_cells: int, rng: Rng) -> np.ndarray:
    """Voronoi cell id per pixel for uniformly drawn seed points."""
    pts = rng.uniform((n_cells, 2), 0, size)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    d = (yy[..., None] - pts[:, 0]) ** 2 + (xx[..., None] - pts[:, 1]) ** 2
    return d.argmin(axis=-1)


def boundary_pixels(cells: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour in a different cell."""
    edge = np.zeros(cells.shape, bool)
    dy = cells[1:] != cells[:-1]
    dx = cells[:, 1:] != cells[:, :-1]
    edge[1:] |= dy
    edge[:-1] |= dy
    edge[:, 1:] |= dx
    edge[:, :-1] |= dx
    return edge


def membrane_mask(cells: np.ndarray, thickness: float) -> np.ndarray:
    """Pixels within ``thickness / 2`` (Euclidean) of a boundary pixel."""
    edge = boundary_pixels(cells)
    if not edge.any():
        return edge
    dist = ndimage.distance_transform_edt(~edge)
    return dist <= thickness / 2.0


def synth_sample(cfg: SyntheticCellConfig, index: int) -> Tuple[np.ndarray, np.ndarray]:
    """One synthetic (uint8 image, label) pair."""
    rng = Rng(cfg.seed).child(index)
    size = cfg.size
    n_cells = int(rng.integers(cfg.cells[0], cfg.cells[1] + 1))
    cells = cell_partition(size, n_cells, rng)
    membrane = membrane_mask(cells, cfg.thickness)
    shade = rng.uniform(n_cells, 0.55, 0.8)
    image = shade[cells]
    if cfg.classes == 2:
        label = np.where(membrane, 0, 1)
    elif cfg.classes == 5:
        glia = rng.uniform(n_cells) < 0.25
        label = np.where(glia[cells], 3, 4)
        image = np.where(glia[cells], 0.9, image)
        yy, xx = np.mgrid[0:size, 0:size]
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(2, 0, size)
            ry, rx = rng.uniform(2, 2.0, 5.0)
            blob = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
            label = np.where(blob, 1, label)
            image = np.where(blob, 0.35, image)
        edge = np.argwhere(membrane)
        for _ in range(int(rng.integers(0, 3))):
            cy, cx = edge[int(rng.integers(0, len(edge)))]
            dot = (yy - cy) ** 2 + (xx - cx) ** 2 <= 4
            label = np.where(dot, 2, label)
            image = np.where(dot, 0.05, image)
        label = np.where(membrane & (label != 2), 0, label)
    else:
        raise ConfigError(f"synthetic data supports 2 or 5 classes, got {cfg.classes}")
    image = np.where(membrane & (label == 0), 0.15, image)
    image = image + rng.normal((size, size), cfg.noise)
    image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    return image, label.astype(np.uint8)


def generate_synthetic(cfg: SyntheticCellConfig, root) -> DatasetSpec:
    """Write ``cfg.count`` synthetic images and masks under ``root``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    names = TWO_CLASS_NAMES if cfg.classes == 2 else FIVE_CLASS_NAMES
    spec = DatasetSpec(root, list(names), DEFAULT_PALETTE[:len(names)])
    for i in range(cfg.count):
        image, label = synth_sample(cfg, i)
        stem = f"cell_{i:04d}"
        Image.fromarray(image).save(spec.image_path(stem))
        Image.fromarray(label).save(spec.label_path(stem))
        spec.stems.append(stem)
    write_manifest(spec)
    return spec


def load_tiles(spec: DatasetSpec, tile: Optional[int] = None, stems: Optional[Sequence[str]] = None
               ) -> List[SampleTile]:
    tiles: List[SampleTile] = []
    for stem in stems if stems is not None else spec.stems:
        image, label = spec.load(stem)
        x = to_model_input(image)
        size = tile or label.shape[0]
        tiles.extend(tile_image(x, label.astype(np.int64), size, source=stem))
    return tiles


def class_histogram(label: np.ndarray, num_classes: int) -> np.ndarray:
    return np.bincount(np.asarray(label).ravel(), minlength=num_classes)


def index_tiles(tiles: Sequence[SampleTile]) -> Dict[str, SampleTile]:
    return {t.id: t for t in tiles}
