"""Datasets: IDX files, a synthetic shapes corpus, and one-vs-rest tasks."""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

SHAPES = ("square", "circle", "triangle", "cross", "diamond")
FILLS = ("solid", "outline")
NUM_SHAPE_CLASSES = len(SHAPES) * len(FILLS)

_IDX_UBYTE = 0x08


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int
    split: str = ""

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError("image and label counts differ")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)

    def class_indices(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.labels == c)


@dataclass(frozen=True)
class BinaryTask:
    category: int
    positives: np.ndarray
    negatives: np.ndarray

    @property
    def indices(self) -> np.ndarray:
        return np.concatenate([self.positives, self.negatives])

    @property
    def targets(self) -> np.ndarray:
        """1 for positives, 0 for negatives, aligned with :attr:`indices`."""
        return np.concatenate([np.ones(len(self.positives), np.int64), np.zeros(len(self.negatives), np.int64)])


# -- IDX -------------------------------------------------------------------


def write_idx(path: str | os.PathLike, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    if not 1 <= arr.ndim <= 255:
        raise IdxFormatError("IDX supports 1..255 dimensions")
    header = bytes([0, 0, _IDX_UBYTE, arr.ndim]) + np.asarray(arr.shape, dtype=">u4").tobytes()
    with open(path, "wb") as f:
        f.write(header)
        f.write(arr.tobytes())


def read_idx(path: str | os.PathLike) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise IdxFormatError(f"{path}: bad magic")
    if raw[2] != _IDX_UBYTE:
        raise IdxFormatError(f"{path}: unsupported element type 0x{raw[2]:02x}")
    ndim = raw[3]
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise IdxFormatError(f"{path}: truncated header")
    dims = tuple(int(d) for d in np.frombuffer(raw, dtype=">u4", count=ndim, offset=4))
    n = int(np.prod(dims))
    if len(raw) - head < n:
        raise IdxFormatError(f"{path}: truncated data ({len(raw) - head} of {n} bytes)")
    if len(raw) - head > n:
        raise IdxFormatError(f"{path}: {len(raw) - head - n} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims).copy()


def bytes_to_unit(b: np.ndarray) -> np.ndarray:
    return b.astype(np.float32) / np.float32(255.0)


def unit_to_bytes(x: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def load_idx(images_path, labels_path, num_classes: int | None = None, split: str = "") -> Dataset:
    img = read_idx(images_path)
    lab = read_idx(labels_path)
    if lab.ndim != 1:
        raise IdxFormatError(f"{labels_path}: labels must be 1-d")
    if img.shape[0] != lab.shape[0]:
        raise IdxFormatError(f"count mismatch: {img.shape[0]} images vs {lab.shape[0]} labels")
    if img.ndim == 3:
        img = img[:, None]
    elif img.ndim != 4:
        raise IdxFormatError(f"{images_path}: images must be (N, H, W) or (N, C, H, W)")
    labels = lab.astype(np.int64)
    k = num_classes if num_classes is not None else (int(labels.max()) + 1 if len(labels) else 0)
    return Dataset(bytes_to_unit(img), labels, k, split)


def save_idx(dataset: Dataset, images_path, labels_path) -> None:
    imgs = unit_to_bytes(dataset.images)
    write_idx(images_path, imgs[:, 0] if imgs.shape[1] == 1 else imgs)
    write_idx(labels_path, dataset.labels.astype(np.uint8))


def save_dataset_dir(directory, datasets: dict[str, Dataset]) -> list[Path]:
    """Write ``{split}-images.idx`` / ``{split}-labels.idx`` for each split."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    out = []
    for split, ds in datasets.items():
        ip, lp = d / f"{split}-images.idx", d / f"{split}-labels.idx"
        save_idx(ds, ip, lp)
        out += [ip, lp]
    return out


def load_dataset_dir(directory, split: str, num_classes: int | None = None) -> Dataset:
    d = Path(directory)
    return load_idx(d / f"{split}-images.idx", d / f"{split}-labels.idx", num_classes, split)


# -- synthetic shapes -------------------------------------------------------


def _shape_mask(kind: str, yy: np.ndarray, xx: np.ndarray, cy: float, cx: float, r: float) -> np.ndarray:
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * r
    if kind == "circle":
        return dx * dx + dy * dy <= r * r
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2.0)
    if kind == "cross":
        arm = max(2.5, r / 3.0)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if kind == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    raise KeyError(kind)


def render_shape(kind: str, fill: str, size: int, cy: float, cx: float, r: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    inside = _shape_mask(kind, yy, xx, cy, cx, r)
    if fill == "outline":
        inside = inside & ~ndimage.binary_erosion(inside, iterations=2)
    return inside


def generate_shapes(seed: int, per_class: int, size: int = 32, noise: float = 0.05, split: str = "") -> Dataset:
    """10 classes (5 shapes x solid/outline) at random position, scale and brightness.

    Pixels are quantised to multiples of 1/255 so an IDX round trip is exact.
    """
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    n = per_class * NUM_SHAPE_CLASSES
    labels = np.tile(np.arange(NUM_SHAPE_CLASSES, dtype=np.int64), per_class)
    labels = labels[rng.permutation(n)]
    out = np.empty((n, 1, size, size), dtype=np.uint8)
    rmin, rmax = size * 0.19, size * 0.34
    for i, c in enumerate(labels):
        kind, fill = SHAPES[c // 2], FILLS[c % 2]
        r = rng.uniform(rmin, rmax)
        lo, hi = r + 1.0, size - 1.0 - r
        cy, cx = rng.uniform(lo, hi, size=2)
        bright = rng.uniform(0.6, 1.0)
        img = rng.normal(0.0, noise, size=(size, size))
        img = img + bright * render_shape(kind, fill, size, cy, cx, r)
        out[i, 0] = unit_to_bytes(img)
    return Dataset(bytes_to_unit(out), labels, NUM_SHAPE_CLASSES, split)


# -- binary tasks ------------------------------------------------------------


def make_binary_task(dataset: Dataset, category: int, seed: int, max_positives: int | None = None) -> BinaryTask:
    """Class ``category`` vs a same-sized uniform sample of all other images."""
    pos = dataset.class_indices(category)
    if len(pos) == 0:
        raise ValueError(f"category {category} absent from dataset")
    rng = np.random.default_rng(seed)
    if max_positives is not None and len(pos) > max_positives:
        pos = np.sort(rng.choice(pos, size=max_positives, replace=False))
    rest = np.flatnonzero(dataset.labels != category)
    if len(rest) < len(pos):
        raise ValueError("not enough negatives for a balanced task")
    neg = np.sort(rng.choice(rest, size=len(pos), replace=False))
    return BinaryTask(category, pos, neg)
