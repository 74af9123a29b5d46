"""Datasets: a seeded synthetic shapes task and an IDX (ubyte) file reader."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import BadMagic, ConfigError, CountMismatch, Truncated
from ..tensor import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

SHAPES = ("square", "ring", "hbar", "vbar", "disk", "cross", "triangle", "diamond")

TEST_OFFSET = 10_000_000


@dataclass
class ArrayDataset:
    images: np.ndarray  # [n, H, W, C] in [0, 1]
    labels: np.ndarray  # [n] int64

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise CountMismatch(f"{len(self.images)} images vs {len(self.labels)} labels")

    def __len__(self) -> int:
        return len(self.labels)


def _shape_mask(kind: str, h: int, w: int, cy: float, cx: float, size: float) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    r = size / 2.0
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "cross":
        arm = max(r / 3.0, 1.5)
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if kind == "triangle":
        # apex up; width grows linearly towards the base
        t = (dy + r) / (2 * r)
        return (t >= 0) & (t <= 1) & (np.abs(dx) <= t * r)
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (0.55 * r) ** 2)
    if kind == "hbar":
        return (np.abs(dy) <= r / 3.0) & (np.abs(dx) <= r)
    if kind == "vbar":
        return (np.abs(dx) <= r / 3.0) & (np.abs(dy) <= r)
    return np.abs(dy) + np.abs(dx) <= r


@dataclass(frozen=True)
class SyntheticDataset:
    """One shape on a uniform background; ``sample(i)`` depends only on (seed, i).

    Labels cycle through the classes (``i % num_classes``), so any contiguous
    index range is balanced up to one image per class.
    """

    num_classes: int = 4
    image_h: int = 32
    image_w: int = 32
    channels: int = 1
    noise: float = 0.02
    seed: int = 0
    min_size: int = 14
    max_size: int = 24

    def __post_init__(self):
        if not 1 <= self.num_classes <= len(SHAPES):
            raise ValueError(f"num_classes must be in [1, {len(SHAPES)}]")

    def sample(self, index: int) -> tuple[np.ndarray, int]:
        label = index % self.num_classes
        rng = RngStream(self.seed).derive(0xDA7A, index)
        u = rng.uniform(6)
        h, w = self.image_h, self.image_w
        size = self.min_size + u[0] * (self.max_size - self.min_size)
        r = size / 2.0
        cy = r + u[1] * max(h - 2 * r, 0.0)
        cx = r + u[2] * max(w - 2 * r, 0.0)
        background = 0.05 + 0.3 * u[3]
        foreground = background + 0.4 + 0.25 * u[4]
        img = np.full((h, w), background)
        img[_shape_mask(SHAPES[label], h, w, cy, cx, size)] = foreground
        if self.noise > 0:
            img = img + self.noise * rng.normal(h * w).reshape(h, w)
        img = np.clip(img, 0.0, 1.0)
        return np.repeat(img[..., None], self.channels, axis=-1), label

    def arrays(self, start: int, count: int) -> ArrayDataset:
        pairs = [self.sample(start + i) for i in range(count)]
        return ArrayDataset(
            np.stack([p[0] for p in pairs]), np.array([p[1] for p in pairs], dtype=np.int64)
        )


# IDX files

def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_header(blob: bytes, magic: int, path) -> tuple[int, ...]:
    if len(blob) < 4:
        raise Truncated(f"{path}: file shorter than its magic number")
    (found,) = struct.unpack(">I", blob[:4])
    if found != magic:
        raise BadMagic(f"{path}: magic 0x{found:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    need = 4 + 4 * ndim
    if len(blob) < need:
        raise Truncated(f"{path}: header truncated")
    return struct.unpack(f">{ndim}I", blob[4:need])


def read_idx_images(path) -> np.ndarray:
    with _open(path) as fh:
        blob = fh.read()
    dims = _read_header(blob, IDX_IMAGES_MAGIC, path)
    n, rows, cols = dims
    payload = blob[16:]
    expected = n * rows * cols
    if len(payload) < expected:
        raise Truncated(f"{path}: {len(payload)} pixel bytes, expected {expected}")
    pixels = np.frombuffer(payload[:expected], dtype=np.uint8).reshape(n, rows, cols, 1)
    return pixels.astype(np.float64) / 255.0


def read_idx_labels(path) -> np.ndarray:
    with _open(path) as fh:
        blob = fh.read()
    (n,) = _read_header(blob, IDX_LABELS_MAGIC, path)
    payload = blob[8:]
    if len(payload) < n:
        raise Truncated(f"{path}: {len(payload)} label bytes, expected {n}")
    return np.frombuffer(payload[:n], dtype=np.uint8).astype(np.int64)


def read_idx(images_path, labels_path) -> ArrayDataset:
    """Load an image/label file pair; pixels are scaled to [0, 1]."""
    images = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise CountMismatch(f"{len(images)} images vs {len(labels)} labels")
    return ArrayDataset(images, labels)


def write_idx_images(path, pixels: np.ndarray) -> None:
    pixels = np.asarray(pixels, dtype=np.uint8)
    n, rows, cols = pixels.shape
    Path(path).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols) + pixels.tobytes())


def write_idx_labels(path, labels) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    Path(path).write_bytes(struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + labels.tobytes())


def load_splits(data_cfg, seed: int) -> tuple[ArrayDataset, ArrayDataset]:
    """Train and test sets for an experiment's data section."""
    if data_cfg.source == "synthetic":
        gen = SyntheticDataset(
            data_cfg.num_classes, data_cfg.image_h, data_cfg.image_w,
            data_cfg.channels, data_cfg.noise, seed,
        )
        return gen.arrays(0, data_cfg.train_size), gen.arrays(TEST_OFFSET, data_cfg.test_size)
    train = read_idx(data_cfg.train_images, data_cfg.train_labels)
    test = read_idx(data_cfg.test_images, data_cfg.test_labels)
    for name, ds in (("train", train), ("test", test)):
        if ds.images.shape[1:3] != (data_cfg.image_h, data_cfg.image_w):
            raise ConfigError(
                f"{name} images are {ds.images.shape[1:3]}, config says "
                f"{(data_cfg.image_h, data_cfg.image_w)}"
            )
        if data_cfg.channels != 1:
            raise ConfigError("IDX images are single-channel; set data.channels to 1")
        if ds.labels.max(initial=0) >= data_cfg.num_classes:
            raise ConfigError(f"{name} labels exceed data.num_classes")
    return train, test
