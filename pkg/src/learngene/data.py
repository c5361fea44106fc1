"""Image datasets: the flat-records container, CIFAR-10 binary batches, and small helpers.

Pixels stay uint8 in NHWC order until batches are built.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

FLAT_MAGIC = b"LGDS"
FLAT_VERSION = 1
_HEADER = struct.Struct("<4sHHIHHB")
CIFAR10_RECORD = 1 + 32 * 32 * 3
CIFAR10_CLASSES = ("airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck")
FORMATS = ("flat-records", "cifar10-binary")


class DatasetError(ValueError):
    pass


@dataclass
class ImageDataset:
    class_names: list[str]
    images: np.ndarray       # (N, H, W, C) uint8
    labels: np.ndarray       # (N,) int64

    def __post_init__(self):
        self.images = np.asarray(self.images)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.images.dtype != np.uint8:
            raise DatasetError(f"images must be uint8 NHWC, got {self.images.dtype} {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise DatasetError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError("label out of range of class names")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def shape(self) -> tuple[int, int, int]:
        """(height, width, channels)."""
        return tuple(self.images.shape[1:])

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.class_names))


# ---------------------------------------------------------------------------
# flat records

def encode_flat_records(ds: ImageDataset) -> bytes:
    h, w, c = ds.shape
    names = b"".join(struct.pack("<H", len(n.encode())) + n.encode() for n in ds.class_names)
    body = np.concatenate([ds.labels.astype(np.uint8)[:, None], ds.images.reshape(len(ds), -1)], axis=1)
    header = _HEADER.pack(FLAT_MAGIC, FLAT_VERSION, len(ds.class_names), len(ds), h, w, c)
    return header + names + body.tobytes()


def save_flat_records(ds: ImageDataset, path: str | os.PathLike) -> None:
    from .checkpoint import atomic_write_bytes
    atomic_write_bytes(path, encode_flat_records(ds))


def decode_flat_records(buf: bytes) -> ImageDataset:
    if len(buf) < _HEADER.size:
        raise DatasetError(f"truncated header: expected {_HEADER.size} bytes, got {len(buf)}")
    magic, version, n_classes, n_records, h, w, c = _HEADER.unpack_from(buf, 0)
    if magic != FLAT_MAGIC:
        raise DatasetError(f"bad magic at offset 0: {magic!r} (expected {FLAT_MAGIC!r})")
    if version != FLAT_VERSION:
        raise DatasetError(f"unsupported version {version} at offset 4")
    off = _HEADER.size
    names = []
    for i in range(n_classes):
        if off + 2 > len(buf):
            raise DatasetError(f"truncated class name table at offset {off}: expected {off + 2} bytes, got {len(buf)}")
        (n,) = struct.unpack_from("<H", buf, off)
        if off + 2 + n > len(buf):
            raise DatasetError(f"truncated class name {i} at offset {off}: expected {off + 2 + n} bytes, got {len(buf)}")
        try:
            names.append(buf[off + 2:off + 2 + n].decode("utf-8"))
        except UnicodeDecodeError as e:
            raise DatasetError(f"class name {i} at offset {off} is not UTF-8") from e
        off += 2 + n
    rec = 1 + h * w * c
    expected = off + n_records * rec
    if len(buf) < expected:
        raise DatasetError(f"truncated records: expected {expected} bytes, got {len(buf)} "
                           f"(record {(len(buf) - off) // rec} starts at offset {off + (len(buf) - off) // rec * rec})")
    if len(buf) > expected:
        raise DatasetError(f"trailing data: expected {expected} bytes, got {len(buf)}")
    body = np.frombuffer(buf, dtype=np.uint8, count=n_records * rec, offset=off).reshape(n_records, rec)
    labels = body[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= n_classes)
    if bad.size:
        i = int(bad[0])
        raise DatasetError(f"label {labels[i]} >= class count {n_classes} in record {i} at offset {off + i * rec}")
    images = body[:, 1:].reshape(n_records, h, w, c).copy()
    return ImageDataset(names, images, labels)


# ---------------------------------------------------------------------------
# cifar-10 binary

def decode_cifar10(buf: bytes) -> ImageDataset:
    if len(buf) % CIFAR10_RECORD:
        n = len(buf) // CIFAR10_RECORD
        raise DatasetError(f"truncated record {n} at offset {n * CIFAR10_RECORD}: expected "
                           f"{(n + 1) * CIFAR10_RECORD} bytes, got {len(buf)}")
    body = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR10_RECORD)
    labels = body[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        i = int(bad[0])
        raise DatasetError(f"label {labels[i]} >= 10 in record {i} at offset {i * CIFAR10_RECORD}")
    images = body[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1).copy()
    return ImageDataset(list(CIFAR10_CLASSES), images, labels)


def load_dataset(path: str | os.PathLike, format: str = "flat-records") -> ImageDataset:
    """Read a dataset file; a cifar10-binary directory loads every ``*.bin`` batch inside it."""
    path = Path(path)
    if format not in FORMATS:
        raise DatasetError(f"unknown format {format!r}; expected one of {', '.join(FORMATS)}")
    if format == "cifar10-binary":
        files = sorted(p for p in path.glob("*.bin") if p.name != "batches.meta.bin") if path.is_dir() else [path]
        if not files:
            raise DatasetError(f"no .bin batches in {path}")
        parts = [decode_cifar10(p.read_bytes()) for p in files]
        return ImageDataset(list(CIFAR10_CLASSES), np.concatenate([p.images for p in parts]),
                            np.concatenate([p.labels for p in parts]))
    return decode_flat_records(path.read_bytes())


# ---------------------------------------------------------------------------
# transforms

def downsample(ds: ImageDataset, size: int) -> ImageDataset:
    """Block-average images down to ``size`` x ``size``; the side must divide evenly."""
    h, w, c = ds.shape
    if h % size or w % size:
        raise DatasetError(f"cannot block-average {h}x{w} to {size}x{size}")
    fh, fw = h // size, w // size
    x = ds.images.reshape(len(ds), size, fh, size, fw, c).astype(np.float32).mean(axis=(2, 4))
    return ImageDataset(list(ds.class_names), np.round(x).astype(np.uint8), ds.labels.copy())


def subset(ds: ImageDataset, per_class: int | None = None, classes: Sequence[int] | None = None,
           seed: int = 0) -> ImageDataset:
    """Keep at most ``per_class`` images of each class (chosen by ``seed``), optionally a class subset.

    Kept classes are relabelled 0..m-1 in the order given.
    """
    classes = list(range(len(ds.class_names))) if classes is None else [int(c) for c in classes]
    rng = np.random.default_rng(seed)
    keep, labels = [], []
    for new, c in enumerate(classes):
        idx = np.flatnonzero(ds.labels == c)
        if per_class is not None and len(idx) > per_class:
            idx = np.sort(rng.choice(idx, size=per_class, replace=False))
        keep.append(idx)
        labels.append(np.full(len(idx), new))
    keep = np.concatenate(keep)
    return ImageDataset([ds.class_names[c] for c in classes], ds.images[keep], np.concatenate(labels))


def digits_dataset(size: int = 16) -> ImageDataset:
    """scikit-learn's 8x8 digits, upsampled by pixel repetition, as a 10-class grayscale set."""
    from sklearn.datasets import load_digits

    d = load_digits()
    img = np.round(d.images * (255.0 / 16.0)).astype(np.uint8)
    if size % 8:
        raise DatasetError("digits size must be a multiple of 8")
    f = size // 8
    img = img.repeat(f, axis=1).repeat(f, axis=2)[..., None]
    return ImageDataset([str(i) for i in range(10)], img, d.target)


def synthetic_dataset(n_classes: int = 8, per_class: int = 20, size: int = 16, channels: int = 3,
                      seed: int = 0) -> ImageDataset:
    """Class-dependent blobs over noise; cheap and learnable, meant for smoke tests."""
    rng = np.random.default_rng(seed)
    protos = rng.uniform(0, 255, size=(n_classes, size, size, channels))
    imgs, labels = [], []
    for c in range(n_classes):
        noise = rng.normal(0, 40, size=(per_class, size, size, channels))
        imgs.append(np.clip(protos[c] + noise, 0, 255))
        labels.append(np.full(per_class, c))
    return ImageDataset([f"class{c}" for c in range(n_classes)], np.concatenate(imgs).astype(np.uint8),
                        np.concatenate(labels))
