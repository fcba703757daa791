"""Datasets: the CIFAR-10 binary layout and a synthetic shapes corpus.

Both produce a DatasetHandle holding float32 [N, 3, 32, 32] images in [0, 1]
plus optional int64 labels.  The synthetic corpus renders colored geometric
shapes: each class is one (shape, color) pair, labels cycle round-robin so
class counts stay balanced within one, and every image draws from an RNG
stream keyed by (seed, split, index), making splits disjoint and the whole
dataset byte-stable for a given seed.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_SIDE = 32
_RECORD_BYTES = 1 + 3 * IMAGE_SIDE * IMAGE_SIDE  # label byte + channel planes
_CIFAR_CLASSES = 10

_TRAIN_FILES = tuple(f"data_batch_{i}" for i in range(1, 6))
_TEST_FILES = ("test_batch",)

_SPLIT_CODES = {"train": 0, "val": 1, "test": 2}

_SHAPES = ("disk", "square", "triangle", "plus", "ring")
_COLORS = (
    (0.9, 0.15, 0.15),
    (0.15, 0.8, 0.2),
    (0.2, 0.3, 0.9),
    (0.9, 0.85, 0.2),
    (0.85, 0.2, 0.85),
    (0.2, 0.85, 0.85),
    (0.95, 0.55, 0.15),
    (0.9, 0.9, 0.9),
)
MAX_SYNTH_CLASSES = len(_SHAPES) * len(_COLORS)


class DataFormatError(ValueError):
    """Input bytes do not follow the expected record layout."""


@dataclass
class DatasetHandle:
    """In-memory dataset with provenance fields."""

    images: np.ndarray
    labels: "np.ndarray | None"
    kind: str
    split: str

    def __post_init__(self) -> None:
        if self.images.ndim != 4 or self.images.shape[1] != 3:
            raise ValueError(f"expected [N, 3, H, W] images, got {self.images.shape}")
        if self.images.dtype != np.float32:
            raise ValueError(f"images must be float32, got {self.images.dtype}")
        lo, hi = float(self.images.min(initial=0.0)), float(self.images.max(initial=0.0))
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"images must lie in [0, 1], found range [{lo}, {hi}]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.images.shape[0],):
                raise ValueError(
                    f"labels shape {self.labels.shape} does not match "
                    f"{self.images.shape[0]} images"
                )

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    @property
    def num_classes(self) -> "int | None":
        if self.labels is None or self.labels.size == 0:
            return None
        return int(self.labels.max()) + 1


def _parse_cifar_file(path: Path) -> tuple[np.ndarray, np.ndarray]:
    blob = path.read_bytes()
    if len(blob) == 0 or len(blob) % _RECORD_BYTES != 0:
        raise DataFormatError(
            f"{path}: size {len(blob)} is not a multiple of the "
            f"{_RECORD_BYTES}-byte record"
        )
    records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, _RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    if labels.max(initial=0) >= _CIFAR_CLASSES:
        bad = int(labels.max())
        raise DataFormatError(f"{path}: label {bad} out of range 0..{_CIFAR_CLASSES - 1}")
    images = (
        records[:, 1:]
        .reshape(-1, 3, IMAGE_SIDE, IMAGE_SIDE)
        .astype(np.float32)
        / 255.0
    )
    return images, labels


def load_cifar10(path: "str | Path", split: str = "train") -> DatasetHandle:
    """Parse the public binary layout: 1 label byte, then 3 row-major planes.

    `path` may be a directory holding the standard batch files or one .bin
    file to treat as the requested split.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    path = Path(path)
    if path.is_dir():
        names = _TRAIN_FILES if split == "train" else _TEST_FILES
        files = [path / name for name in names]
        missing = [str(f) for f in files if not f.exists()]
        if missing:
            raise FileNotFoundError(f"missing CIFAR-10 batch files: {missing}")
    elif path.exists():
        files = [path]
    else:
        raise FileNotFoundError(str(path))
    parts = [_parse_cifar_file(f) for f in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    return DatasetHandle(images=images, labels=labels, kind="cifar10", split=split)


# ---------------------------------------------------------------------------
# Synthetic shapes.
# ---------------------------------------------------------------------------

def _split_code(split: str) -> int:
    if split in _SPLIT_CODES:
        return _SPLIT_CODES[split]
    # Any other split name still gets its own deterministic stream.
    return 16 + zlib.crc32(split.encode("utf-8"))


def _shape_mask(shape: str, cx: float, cy: float, radius: float) -> np.ndarray:
    ys, xs = np.mgrid[0:IMAGE_SIDE, 0:IMAGE_SIDE]
    dx = xs - cx
    dy = ys - cy
    dist = np.sqrt(dx * dx + dy * dy)
    if shape == "disk":
        return dist <= radius
    if shape == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= radius * 0.85
    if shape == "triangle":
        return (dy <= radius * 0.8) & (np.abs(dx) <= (radius * 0.8 - dy) * 0.75)
    if shape == "plus":
        arm = radius * 0.4
        return ((np.abs(dx) <= arm) | (np.abs(dy) <= arm)) & (
            np.maximum(np.abs(dx), np.abs(dy)) <= radius
        )
    if shape == "ring":
        return (dist <= radius) & (dist >= radius * 0.55)
    raise ValueError(f"unknown shape {shape!r}")


def _render_image(class_id: int, rng: np.random.Generator) -> np.ndarray:
    shape = _SHAPES[class_id % len(_SHAPES)]
    base_color = np.array(_COLORS[class_id // len(_SHAPES)])
    image = rng.normal(0.25, 0.02, size=(3, IMAGE_SIDE, IMAGE_SIDE))
    # Shapes dominate the frame and the background stays near-constant so
    # that aggressive two-view crops (down to 20% area) still share most of
    # their content; otherwise many positive pairs would agree on nothing
    # but noise.
    cx = IMAGE_SIDE / 2 + rng.uniform(-2.0, 2.0)
    cy = IMAGE_SIDE / 2 + rng.uniform(-2.0, 2.0)
    radius = rng.uniform(11.0, 14.0)
    mask = _shape_mask(shape, cx, cy, radius)
    color = np.clip(base_color * rng.uniform(0.85, 1.15), 0.0, 1.0)
    image[:, mask] = color[:, None]
    image += rng.normal(0.0, 0.015, size=image.shape)
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def synth_dataset(
    classes: int,
    size: int,
    seed: int = 0,
    split: str = "train",
) -> DatasetHandle:
    """Colored-shape classification data; class = (shape, color) pair.

    Labels cycle 0..classes-1, so the histogram is balanced within one.
    Distinct splits draw from disjoint RNG streams.
    """
    if classes < 2:
        raise ValueError(f"need at least two classes, got {classes}")
    if classes > MAX_SYNTH_CLASSES:
        raise ValueError(f"at most {MAX_SYNTH_CLASSES} classes, got {classes}")
    if size < 1:
        raise ValueError(f"size must be positive, got {size}")
    code = _split_code(split)
    images = np.empty((size, 3, IMAGE_SIDE, IMAGE_SIDE), dtype=np.float32)
    labels = np.empty(size, dtype=np.int64)
    from .seeding import STREAM_DATA, stream_rng

    for index in range(size):
        label = index % classes
        rng = stream_rng(seed, STREAM_DATA, code, index)
        images[index] = _render_image(label, rng)
        labels[index] = label
    return DatasetHandle(images=images, labels=labels, kind="synthetic", split=split)
