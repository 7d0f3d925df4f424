"""Dataset ingestion, preprocessing, augmentation and split planning.

Two on-disk formats are supported:

* raw container: ``b"KDDS"``, version byte ``0x01``, uint32-le item count,
  then per item uint16-le height, uint16-le width, one label byte and
  ``height * width`` unsigned pixel bytes;
* PGM directory: binary P5 files (maxval 255) listed in a manifest of
  ``<relative-path> <label>`` lines.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

MAGIC = b"KDDS"
VERSION = 1
MANIFEST_NAME = "manifest.txt"

__all__ = [
    "Dataset",
    "FoldPlan",
    "AugmentConfig",
    "DatasetError",
    "MalformedHeaderError",
    "TruncatedDataError",
    "LabelValueError",
    "EmptyDatasetError",
    "load_dataset",
    "write_container",
    "write_pgm_directory",
    "normalize",
    "resize_bilinear",
    "rotate_image",
    "rotate_augment",
    "rotate_batch",
    "oversample_balance",
    "split_holdout",
    "make_stratified_folds",
]


class DatasetError(ValueError):
    """Base class for dataset ingestion failures."""


class MalformedHeaderError(DatasetError):
    pass


class TruncatedDataError(DatasetError):
    pass


class LabelValueError(DatasetError):
    pass


class EmptyDatasetError(DatasetError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N×1×H×W float32
    labels: np.ndarray  # N int64, 1 = positive
    ids: list = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if not self.ids:
            self.ids = [str(i) for i in range(len(self.labels))]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], [self.ids[i] for i in index])


@dataclass(frozen=True)
class AugmentConfig:
    rotation: tuple = (0.0, 20.0)
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.rotation
        if not 0 <= lo <= hi < 360:
            raise ValueError(f"rotation range must satisfy 0 <= lo <= hi < 360, got {self.rotation}")


@dataclass(frozen=True)
class FoldPlan:
    k: int
    folds: tuple  # tuple of sorted index arrays
    holdout: tuple
    seed: int

    def train_indices(self, fold: int) -> np.ndarray:
        return np.sort(np.concatenate([f for i, f in enumerate(self.folds) if i != fold]))

    def validation_indices(self, fold: int) -> np.ndarray:
        return np.asarray(self.folds[fold])


# ingestion ------------------------------------------------------------------


def write_container(path, images: Sequence[np.ndarray], labels: Sequence[int]) -> None:
    """Write uint8 images (any H×W each) and 0/1 labels as a raw container."""
    if len(images) != len(labels):
        raise ValueError("images and labels differ in length")
    parts = [MAGIC, bytes([VERSION]), struct.pack("<I", len(images))]
    for img, lab in zip(images, labels):
        img = np.asarray(img)
        if img.ndim == 3:
            img = img[0]
        if img.dtype != np.uint8:
            raise ValueError("container pixels must be uint8")
        h, w = img.shape
        parts.append(struct.pack("<HHB", h, w, int(lab)))
        parts.append(np.ascontiguousarray(img).tobytes())
    Path(path).write_bytes(b"".join(parts))


def _read_container(path: Path):
    buf = path.read_bytes()
    if len(buf) < 9:
        raise MalformedHeaderError(f"{path}: header needs 9 bytes, file has {len(buf)}")
    if buf[:4] != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {buf[:4]!r} at byte offset 0")
    if buf[4] != VERSION:
        raise MalformedHeaderError(f"{path}: unsupported version {buf[4]} at byte offset 4")
    (count,) = struct.unpack_from("<I", buf, 5)
    off = 9
    images, labels = [], []
    for item in range(count):
        if off + 5 > len(buf):
            raise TruncatedDataError(f"{path}: item {item} header truncated at byte offset {off}")
        h, w, lab = struct.unpack_from("<HHB", buf, off)
        if h == 0 or w == 0:
            raise MalformedHeaderError(f"{path}: item {item} has zero dimension at byte offset {off}")
        if lab not in (0, 1):
            raise LabelValueError(f"{path}: item {item} label {lab} outside {{0,1}} at byte offset {off + 4}")
        off += 5
        end = off + h * w
        if end > len(buf):
            raise TruncatedDataError(
                f"{path}: item {item} pixel data truncated at byte offset {off}: need {h * w} bytes, have {len(buf) - off}"
            )
        images.append(np.frombuffer(buf, dtype=np.uint8, count=h * w, offset=off).reshape(h, w))
        labels.append(lab)
        off = end
    if off != len(buf):
        raise MalformedHeaderError(f"{path}: {len(buf) - off} trailing bytes after item {count - 1} at offset {off}")
    return images, labels, [f"{path.name}#{i}" for i in range(count)]


def _read_pgm(path: Path) -> np.ndarray:
    buf = path.read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedHeaderError(f"{path}: PGM header incomplete at byte offset {pos}")
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte after maxval
    if tokens[0] != b"P5":
        raise MalformedHeaderError(f"{path}: expected P5 magic at byte offset 0, got {tokens[0]!r}")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: non-integer PGM header field") from exc
    if maxval != 255:
        raise MalformedHeaderError(f"{path}: maxval must be 255, got {maxval}")
    if len(buf) - pos < w * h:
        raise TruncatedDataError(f"{path}: pixel data truncated at byte offset {pos}: need {w * h}, have {len(buf) - pos}")
    return np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)


def write_pgm_directory(directory, images: Sequence[np.ndarray], labels: Sequence[int]) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, lab) in enumerate(zip(images, labels)):
        img = np.asarray(img, dtype=np.uint8)
        if img.ndim == 3:
            img = img[0]
        name = f"img_{i:05d}.pgm"
        h, w = img.shape
        (directory / name).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())
        lines.append(f"{name} {int(lab)}")
    (directory / MANIFEST_NAME).write_text("\n".join(lines) + "\n")
    return directory


def _read_pgm_directory(path: Path):
    manifest = path / MANIFEST_NAME if path.is_dir() else path
    root = manifest.parent
    images, labels, ids = [], [], []
    for lineno, line in enumerate(manifest.read_text().splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.rsplit(maxsplit=1)
        if len(parts) != 2:
            raise MalformedHeaderError(f"{manifest}:{lineno}: expected '<relative-path> <label>'")
        rel, lab = parts
        if lab not in ("0", "1"):
            raise LabelValueError(f"{manifest}:{lineno}: label {lab!r} outside {{0,1}}")
        images.append(_read_pgm(root / rel))
        labels.append(int(lab))
        ids.append(rel)
    return images, labels, ids


def load_dataset(path, format: str = "raw", side: Optional[int] = None, normalized: bool = True) -> Dataset:
    """Read a dataset in manifest/container order.

    ``format`` is ``"raw"`` (container) or ``"pgm"`` (directory + manifest).
    Images of differing sizes need ``side`` so they can be resized to a
    common square.  Pixels are scaled into [0, 1] unless ``normalized`` is
    false.
    """
    path = Path(path)
    if format in ("raw", "raw-container"):
        images, labels, ids = _read_container(path)
    elif format in ("pgm", "pgm-directory"):
        images, labels, ids = _read_pgm_directory(path)
    else:
        raise ValueError(f"unknown dataset format {format!r}")
    if not images:
        raise EmptyDatasetError(f"{path}: dataset contains no items")
    arr = [im.astype(np.float32) for im in images]
    if side is not None:
        arr = [im if im.shape == (side, side) else resize_bilinear(im, side, side) for im in arr]
    shapes = {im.shape for im in arr}
    if len(shapes) > 1:
        raise DatasetError(f"{path}: mixed image sizes {sorted(shapes)}; pass side= to resize")
    stack = np.stack(arr)[:, None]
    if normalized:
        stack = normalize(stack)
    return Dataset(stack.astype(np.float32), np.asarray(labels), ids)


# preprocessing --------------------------------------------------------------


def normalize(images) -> np.ndarray:
    """Scale 0..255 pixel values into [0, 1]."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.size and (arr.min() < 0 or arr.max() > 255):
        raise ValueError(f"pixel values must lie in [0, 255], got range [{arr.min()}, {arr.max()}]")
    return arr / np.float32(255.0)


def _bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray, fill: Optional[float]) -> np.ndarray:
    """Sample ``img`` (..., H, W) at fractional coordinates.

    With ``fill=None`` coordinates are clamped to the border; otherwise
    neighbours outside the image contribute ``fill``.
    """
    h, w = img.shape[-2:]
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    wy = (ys - y0).astype(np.float32)
    wx = (xs - x0).astype(np.float32)
    out = 0.0
    for dy, fy in ((0, 1 - wy), (1, wy)):
        for dx, fx in ((0, 1 - wx), (1, wx)):
            yy, xx = y0 + dy, x0 + dx
            inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
            val = img[..., np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)]
            if fill is not None:
                val = np.where(inside, val, np.float32(fill))
            out = out + val * (fy * fx)
    return out


def resize_bilinear(image, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres (corners not aligned).

    Works on the last two axes, so (H, W), (C, H, W) and (N, C, H, W) inputs
    all resize per plane.
    """
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    img = np.asarray(image, dtype=np.float32)
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * (h / out_h) - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * (w / out_w) - 0.5, 0, w - 1)
    return _bilinear_sample(img, ys[:, None], xs[None, :], None).astype(np.float32)


def rotate_image(image, degrees: float) -> np.ndarray:
    """Rotate about the image centre with bilinear sampling and zero fill."""
    img = np.asarray(image, dtype=np.float32)
    if degrees == 0:
        return img.copy()
    h, w = img.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    t = np.deg2rad(degrees)
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    # inverse map: output pixel -> source location
    src_y = np.cos(t) * yy - np.sin(t) * xx + cy
    src_x = np.sin(t) * yy + np.cos(t) * xx + cx
    return _bilinear_sample(img, src_y, src_x, 0.0).astype(np.float32)


def rotate_augment(image, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    lo, hi = cfg.rotation
    return rotate_image(image, float(rng.uniform(lo, hi)) if hi > lo else float(lo))


def rotate_batch(images: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Rotate each image of an N×C×H×W batch by its own uniformly drawn angle.

    Vectorised over the batch; pixel-identical to calling ``rotate_image``
    per image with the same angles.
    """
    lo, hi = cfg.rotation
    imgs = np.asarray(images, dtype=np.float32)
    n, _, h, w = imgs.shape
    angles = rng.uniform(lo, hi, size=n) if hi > lo else np.full(n, float(lo))
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h) - cy, np.arange(w) - cx, indexing="ij")
    t = np.deg2rad(angles)[:, None, None]
    src_y = np.cos(t) * yy - np.sin(t) * xx + cy
    src_x = np.sin(t) * yy + np.cos(t) * xx + cx
    # rotate_image returns zero-angle inputs untouched
    src_y[angles == 0] = yy + cy
    src_x[angles == 0] = xx + cx
    y0 = np.floor(src_y).astype(np.int64)
    x0 = np.floor(src_x).astype(np.int64)
    wy = (src_y - y0).astype(np.float32)
    wx = (src_x - x0).astype(np.float32)
    planes = imgs.transpose(1, 0, 2, 3)
    b = np.arange(n)[:, None, None]
    out = 0.0
    for dy, fy in ((0, 1 - wy), (1, wy)):
        for dx, fx in ((0, 1 - wx), (1, wx)):
            r, c = y0 + dy, x0 + dx
            inside = (r >= 0) & (r < h) & (c >= 0) & (c < w)
            val = planes[:, b, np.clip(r, 0, h - 1), np.clip(c, 0, w - 1)]
            out = out + np.where(inside, val, np.float32(0.0)) * (fy * fx)
    return np.ascontiguousarray(np.asarray(out, dtype=np.float32).transpose(1, 0, 2, 3))


# sampling and splits ----------------------------------------------------------


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))


def oversample_balance(labels, train_indices, seed) -> np.ndarray:
    """Duplicate minority-class indices (with replacement) up to the majority count.

    The result lists ``train_indices`` unchanged, followed by the resampled
    extras, so an already balanced input comes back as an exact copy.
    """
    labels = np.asarray(labels)
    idx = np.asarray(train_indices, dtype=np.int64)
    classes, counts = np.unique(labels[idx], return_counts=True)
    if len(classes) < 2:
        raise ValueError("oversampling needs at least two classes among the training indices")
    target = counts.max()
    rng = _rng(seed)
    extras = []
    for cls, cnt in zip(classes, counts):
        if cnt < target:
            pool = idx[labels[idx] == cls]
            extras.append(rng.choice(pool, size=target - cnt, replace=True))
    return np.concatenate([idx] + extras) if extras else idx.copy()


def split_holdout(labels, train_fraction: float = 0.8, seed=0) -> tuple:
    """Stratified train/test split; per class the test share is floored."""
    labels = np.asarray(labels)
    if len(labels) < 5:
        raise ValueError(f"holdout split needs at least 5 items, got {len(labels)}")
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = _rng(seed)
    train, test = [], []
    for cls in np.unique(labels):
        members = np.flatnonzero(labels == cls)
        if len(members) < 2:
            raise ValueError(f"class {cls} has {len(members)} item(s); holdout split needs at least 2")
        members = rng.permutation(members)
        n_test = math.floor(round(len(members) * (1.0 - train_fraction), 9))
        test.append(members[:n_test])
        train.append(members[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


def make_stratified_folds(labels, train_indices, k: int = 5, seed=0, holdout=()) -> FoldPlan:
    """Per-class shuffle, then deal indices round-robin across ``k`` folds.

    The dealing position carries over from one class to the next, which keeps
    total fold sizes within one of each other.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    labels = np.asarray(labels)
    idx = np.asarray(train_indices, dtype=np.int64)
    rng = _rng(seed)
    buckets: list = [[] for _ in range(k)]
    pos = 0
    for cls in np.unique(labels[idx]):
        members = idx[labels[idx] == cls]
        if len(members) < k:
            raise ValueError(f"class {cls} has {len(members)} items, fewer than k={k}")
        for i in rng.permutation(members):
            buckets[pos % k].append(int(i))
            pos += 1
    folds = tuple(np.sort(np.asarray(b, dtype=np.int64)) for b in buckets)
    holdout = tuple(int(i) for i in np.sort(np.asarray(holdout, dtype=np.int64)))
    return FoldPlan(k, folds, holdout, seed)
