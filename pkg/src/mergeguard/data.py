"""Labeled image sets: IDX ingestion and a synthetic shapes generator."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, IngestionError
from .rng import make_rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class LabeledImageSet:
    images: np.ndarray  # (n, c, h, w) float32 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    poisoned: np.ndarray = field(default=None)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise DataError(f"images must be (n, c, h, w), got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.poisoned is None:
            self.poisoned = np.zeros(len(self.labels), dtype=bool)
        self.poisoned = np.asarray(self.poisoned, dtype=bool)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return self.images.shape[1:]

    def subset(self, idx):
        idx = np.asarray(idx)
        return LabeledImageSet(
            self.images[idx], self.labels[idx], self.num_classes, self.poisoned[idx]
        )

    def copy(self):
        return LabeledImageSet(
            self.images.copy(), self.labels.copy(), self.num_classes, self.poisoned.copy()
        )

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.num_classes)


def _read_header(buf, path, magic, ndim):
    if len(buf) < 4:
        raise IngestionError(f"{path}: truncated at offset 0, no magic number")
    (found,) = struct.unpack_from(">I", buf, 0)
    if found != magic:
        raise IngestionError(
            f"{path}: bad magic 0x{found:08x} at offset 0, expected 0x{magic:08x}"
        )
    end = 4 + 4 * ndim
    if len(buf) < end:
        raise IngestionError(f"{path}: truncated header at offset {len(buf)}, need {end} bytes")
    return struct.unpack_from(f">{ndim}I", buf, 4), end


def _read_payload(buf, path, offset, count):
    if len(buf) - offset < count:
        raise IngestionError(
            f"{path}: truncated payload at offset {len(buf)}, expected {count} bytes from offset {offset}"
        )
    if len(buf) - offset > count:
        raise IngestionError(f"{path}: {len(buf) - offset - count} trailing bytes after offset {offset + count}")
    return np.frombuffer(buf, dtype=np.uint8, count=count, offset=offset)


def load_idx(images_path, labels_path, num_classes=None):
    """Read an IDX image/label file pair; pixels are scaled to [0, 1]."""
    images_path, labels_path = Path(images_path), Path(labels_path)
    ibuf = images_path.read_bytes()
    lbuf = labels_path.read_bytes()
    (n, rows, cols), ioff = _read_header(ibuf, images_path, IDX_IMAGES_MAGIC, 3)
    (m,), loff = _read_header(lbuf, labels_path, IDX_LABELS_MAGIC, 1)
    if n != m:
        raise IngestionError(
            f"count mismatch: {images_path} declares {n} images at offset 4, {labels_path} declares {m} labels"
        )
    pixels = _read_payload(ibuf, images_path, ioff, n * rows * cols)
    labels = _read_payload(lbuf, labels_path, loff, m).astype(np.int64)
    images = (pixels.astype(np.float32) / np.float32(255.0)).reshape(n, 1, rows, cols)
    if num_classes is None:
        num_classes = max(int(labels.max()) + 1 if m else 0, 2)
    return LabeledImageSet(images, labels, num_classes)


def write_idx(images_path, labels_path, images, labels):
    """Write uint8 IDX files; float images in [0, 1] are rescaled to bytes."""
    images = np.asarray(images)
    if images.ndim == 4:
        if images.shape[1] != 1:
            raise DataError("IDX export supports single-channel images")
        images = images[:, 0]
    if images.dtype != np.uint8:
        images = np.rint(np.clip(images, 0, 1) * 255).astype(np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(
        struct.pack(">4I", IDX_IMAGES_MAGIC, n, rows, cols) + images.tobytes()
    )
    labels = np.asarray(labels, dtype=np.uint8)
    Path(labels_path).write_bytes(struct.pack(">2I", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def _line(img, r0, c0, r1, c1, value, width=1):
    steps = max(abs(r1 - r0), abs(c1 - c0)) + 1
    rs = np.rint(np.linspace(r0, r1, steps)).astype(int)
    cs = np.rint(np.linspace(c0, c1, steps)).astype(int)
    for dw in range(width):
        img[np.clip(rs + dw, 0, img.shape[0] - 1), cs] = value


def _draw(shape_id, h, w, rng):
    """One shape on an (h, w) canvas, jittered in position, size and intensity."""
    img = np.zeros((h, w), dtype=np.float64)
    value = rng.uniform(0.75, 1.0)
    size = int(rng.integers(max(4, h // 3), h - 3))
    r0 = int(rng.integers(0, h - size + 1))
    c0 = int(rng.integers(0, w - size + 1))
    r1, c1 = r0 + size - 1, c0 + size - 1
    rm, cm = (r0 + r1) // 2, (c0 + c1) // 2
    if shape_id == 0:  # horizontal bar
        img[rm - 1:rm + 1, c0:c1 + 1] = value
    elif shape_id == 1:  # vertical bar
        img[r0:r1 + 1, cm - 1:cm + 1] = value
    elif shape_id == 2:  # square outline
        img[r0, c0:c1 + 1] = img[r1, c0:c1 + 1] = value
        img[r0:r1 + 1, c0] = img[r0:r1 + 1, c1] = value
    elif shape_id == 3:  # plus
        img[rm, c0:c1 + 1] = value
        img[r0:r1 + 1, cm] = value
    elif shape_id == 4:  # circle outline
        yy, xx = np.mgrid[0:h, 0:w]
        rad = (size - 1) / 2.0
        d = np.hypot(yy - (r0 + rad), xx - (c0 + rad))
        img[np.abs(d - rad) < 0.75] = value
    elif shape_id == 5:  # main diagonal
        _line(img, r0, c0, r1, c1, value, 2)
    elif shape_id == 6:  # X
        _line(img, r0, c0, r1, c1, value)
        _line(img, r0, c1, r1, c0, value)
    elif shape_id == 7:  # filled block
        q = max(2, size // 3)
        img[rm - q:rm + q, cm - q:cm + q] = value
    elif shape_id == 8:  # anti-diagonal
        _line(img, r0, c1, r1, c0, value, 2)
    else:  # two parallel bars
        img[r0:r0 + 2, c0:c1 + 1] = value
        img[r1 - 1:r1 + 1, c0:c1 + 1] = value
    return img


def _clutter(img, count, rng):
    h, w = img.shape
    for _ in range(count):
        r, c = int(rng.integers(0, h - 1)), int(rng.integers(0, w - 1))
        img[r:r + 2, c:c + 2] = np.maximum(img[r:r + 2, c:c + 2], rng.uniform(0.3, 0.8))
    return img


def synth_shapes(n, classes, h=16, w=16, seed=0, noise=0.08, clutter=2):
    """Class-balanced grayscale shape images (bars, squares, crosses, circles...)."""
    if not 2 <= classes <= 10:
        raise DataError(f"classes must lie in [2, 10], got {classes}")
    if h < 10 or w < 10:
        raise DataError(f"images must be at least 10x10, got {h}x{w}")
    rng = make_rng(seed, "synth_shapes")
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    images = np.empty((n, 1, h, w), dtype=np.float32)
    for i, y in enumerate(labels):
        img = _clutter(_draw(int(y), h, w, rng), clutter, rng)
        img += rng.normal(0.0, noise, size=(h, w))
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return LabeledImageSet(images, labels, classes)


def split(dataset, fractions, seed, stream="split"):
    """Disjoint random split into len(fractions) parts (last part takes the rest)."""
    rng = make_rng(seed, stream)
    order = rng.permutation(len(dataset))
    parts, start = [], 0
    for i, f in enumerate(fractions):
        stop = len(dataset) if i == len(fractions) - 1 else start + int(round(f * len(dataset)))
        parts.append(dataset.subset(np.sort(order[start:stop])))
        start = stop
    return parts
