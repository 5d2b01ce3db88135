"""Dataset ingestion, checkpoint persistence, and image export.

Datasets load from the CIFAR-10 binary batches or MNIST IDX files into
float32 (N,C,H,W) arrays scaled to [0,1], preserving file order.  Checkpoints
use a fixed little-endian container ("WAE1") of named float32 tensors plus a
key=value metadata block; writes go to a temporary file followed by an atomic
rename.  Channel visualizations export as binary PPM (P6) or PGM (P5).
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass, replace

import numpy as np

CHECKPOINT_MAGIC = b"WAE1"
CHECKPOINT_VERSION = 1

CIFAR_RECORD = 3073  # 1 label byte + 3 * 1024 channel-major pixels
MNIST_IMAGE_MAGIC = 0x00000803
MNIST_LABEL_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """Images in [0,1] with integer class labels, in file order."""

    images: np.ndarray  # float32 (N,C,H,W)
    labels: np.ndarray  # int64 (N,)
    class_count: int
    split: str

    def __post_init__(self):
        n = self.images.shape[0]
        if n == 0:
            raise ValueError("dataset must contain at least one sample")
        if self.labels.shape != (n,):
            raise ValueError(
                f"labels shape {self.labels.shape} does not match {n} images"
            )
        if self.labels.min() < 0 or self.labels.max() >= self.class_count:
            raise ValueError(
                f"labels must lie in [0, {self.class_count}), found "
                f"[{self.labels.min()}, {self.labels.max()}]"
            )

    def take(self, count: int) -> "LabeledDataset":
        """First `count` samples in file order (reproducible subsetting)."""
        count = min(count, self.images.shape[0])
        return replace(
            self, images=self.images[:count], labels=self.labels[:count]
        )

    def with_images(self, images: np.ndarray) -> "LabeledDataset":
        return replace(self, images=images)


def _read_file(path: str) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"dataset file not found: {path}") from None


def _parse_cifar_file(raw: bytes, path: str):
    if len(raw) == 0:
        raise ValueError(f"{path}: empty file")
    if len(raw) % CIFAR_RECORD != 0:
        raise ValueError(
            f"{path}: size {len(raw)} is not a multiple of the {CIFAR_RECORD}-"
            f"byte record (truncated at byte offset "
            f"{len(raw) - len(raw) % CIFAR_RECORD})"
        )
    records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = records[:, 0].astype(np.int64)
    if labels.max() >= 10:
        bad = int(np.argmax(labels >= 10))
        raise ValueError(
            f"{path}: label {labels[bad]} >= 10 at byte offset "
            f"{bad * CIFAR_RECORD}"
        )
    images = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def _cifar_files(path: str, split: str) -> list[str]:
    if os.path.isfile(path):
        return [path]
    names = (
        [f"data_batch_{i}.bin" for i in range(1, 6)]
        if split == "train"
        else ["test_batch.bin"]
    )
    return [os.path.join(path, n) for n in names]


def _parse_mnist_idx(image_path: str, label_path: str):
    raw = _read_file(image_path)
    if len(raw) < 16:
        raise ValueError(f"{image_path}: header truncated at byte {len(raw)}")
    magic, n, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != MNIST_IMAGE_MAGIC:
        raise ValueError(
            f"{image_path}: bad magic 0x{magic:08x}, expected "
            f"0x{MNIST_IMAGE_MAGIC:08x}"
        )
    need = 16 + n * rows * cols
    if len(raw) < need:
        raise ValueError(f"{image_path}: truncated at byte offset {len(raw)}, "
                         f"need {need}")
    images = (
        np.frombuffer(raw, dtype=np.uint8, count=n * rows * cols, offset=16)
        .reshape(n, 1, rows, cols)
        .astype(np.float32)
        / 255.0
    )
    raw_l = _read_file(label_path)
    if len(raw_l) < 8:
        raise ValueError(f"{label_path}: header truncated at byte {len(raw_l)}")
    magic_l, n_l = struct.unpack(">II", raw_l[:8])
    if magic_l != MNIST_LABEL_MAGIC:
        raise ValueError(
            f"{label_path}: bad magic 0x{magic_l:08x}, expected "
            f"0x{MNIST_LABEL_MAGIC:08x}"
        )
    if n_l != n:
        raise ValueError(f"{label_path}: {n_l} labels for {n} images")
    if len(raw_l) < 8 + n:
        raise ValueError(f"{label_path}: truncated at byte offset {len(raw_l)}")
    labels = np.frombuffer(raw_l, dtype=np.uint8, count=n, offset=8).astype(
        np.int64
    )
    return images, labels


def load_dataset(
    path: str, format: str, split: str, channels: int | None = None
) -> LabeledDataset:
    """Parse a dataset directory (or single file) into a LabeledDataset.

    cifar10-binary: 3073-byte records, channel-major pixels / 255.
    mnist-idx: big-endian IDX pair; grayscale is replicated when `channels`
    asks for more than one channel.
    """
    if split not in ("train", "test"):
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")
    if format == "cifar10-binary":
        parts = [_parse_cifar_file(_read_file(f), f) for f in _cifar_files(path, split)]
        images = np.concatenate([p[0] for p in parts], axis=0)
        labels = np.concatenate([p[1] for p in parts], axis=0)
        return LabeledDataset(images, labels, class_count=10, split=split)
    if format == "mnist-idx":
        stem = "train" if split == "train" else "t10k"
        images, labels = _parse_mnist_idx(
            os.path.join(path, f"{stem}-images-idx3-ubyte"),
            os.path.join(path, f"{stem}-labels-idx1-ubyte"),
        )
        if channels and channels > 1:
            images = np.repeat(images, channels, axis=1)
        return LabeledDataset(images, labels, class_count=10, split=split)
    raise ValueError(f"unknown dataset format {format!r}")


def write_cifar10_binary(path: str, images_u8: np.ndarray, labels: np.ndarray):
    """Inverse of the CIFAR-10 parser; images_u8 is uint8 (N,3,32,32)."""
    if images_u8.dtype != np.uint8 or images_u8.shape[1:] != (3, 32, 32):
        raise ValueError("expected uint8 images of shape (N,3,32,32)")
    records = np.empty((images_u8.shape[0], CIFAR_RECORD), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = images_u8.reshape(images_u8.shape[0], -1)
    with open(path, "wb") as fh:
        fh.write(records.tobytes())


def write_mnist_idx(image_path: str, label_path: str, images_u8, labels):
    """Inverse of the MNIST parser; images_u8 is uint8 (N,rows,cols)."""
    n, rows, cols = images_u8.shape
    with open(image_path, "wb") as fh:
        fh.write(struct.pack(">IIII", MNIST_IMAGE_MAGIC, n, rows, cols))
        fh.write(images_u8.tobytes())
    with open(label_path, "wb") as fh:
        fh.write(struct.pack(">II", MNIST_LABEL_MAGIC, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(
    tensors: dict[str, np.ndarray], metadata: dict[str, str], path: str
) -> None:
    """Write named float32 tensors plus metadata, atomically."""
    blobs = []
    seen = set()
    for name, arr in tensors.items():
        if name in seen:
            raise ValueError(f"duplicate tensor name {name!r}")
        seen.add(name)
        name_b = name.encode("utf-8")
        arr32 = np.ascontiguousarray(arr, dtype="<f4")
        dims = arr32.shape
        blobs.append(struct.pack("<I", len(name_b)))
        blobs.append(name_b)
        blobs.append(struct.pack("<I", len(dims)))
        blobs.append(struct.pack(f"<{len(dims)}I", *dims) if dims else b"")
        blobs.append(arr32.tobytes())
    meta_text = "".join(f"{k}={v}\n" for k, v in metadata.items())
    meta_b = meta_text.encode("utf-8")
    payload = b"".join(
        [
            CHECKPOINT_MAGIC,
            struct.pack("<I", CHECKPOINT_VERSION),
            struct.pack("<I", len(tensors)),
            *blobs,
            struct.pack("<I", len(meta_b)),
            meta_b,
        ]
    )
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def read(self, count: int, what: str) -> bytes:
        if self.pos + count > len(self.data):
            raise ValueError(
                f"{self.path}: truncated while reading {what} at byte offset "
                f"{self.pos}"
            )
        out = self.data[self.pos : self.pos + count]
        self.pos += count
        return out

    def read_u32(self, what: str) -> int:
        return struct.unpack("<I", self.read(4, what))[0]


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict[str, str]]:
    """Read back a checkpoint; rejects bad magic/version, truncation, dupes."""
    reader = _Reader(_read_file(path), path)
    magic = reader.read(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}, expected "
                         f"{CHECKPOINT_MAGIC!r}")
    version = reader.read_u32("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    count = reader.read_u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = reader.read_u32("name length")
        name = reader.read(name_len, "tensor name").decode("utf-8")
        if name in tensors:
            raise ValueError(f"{path}: duplicate tensor name {name!r}")
        rank = reader.read_u32(f"{name} rank")
        dims = struct.unpack(
            f"<{rank}I", reader.read(4 * rank, f"{name} dims")
        )
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        payload = reader.read(4 * size, f"{name} payload")
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    meta_len = reader.read_u32("metadata length")
    meta_text = reader.read(meta_len, "metadata").decode("utf-8")
    metadata: dict[str, str] = {}
    for line in meta_text.splitlines():
        if line:
            key, _, value = line.partition("=")
            metadata[key] = value
    return tensors, metadata


# ---------------------------------------------------------------------------
# Image export


def export_image(image: np.ndarray, path: str) -> None:
    """Write a single (C,H,W) image in [0,1] as binary PPM (C=3) or PGM (C=1).

    Values clamp to [0,1] and round half-up to bytes, so 0.5 maps to 128.
    """
    if image.ndim != 3 or image.shape[0] not in (1, 3):
        raise ValueError(
            f"expected (C,H,W) with C in {{1,3}}, got shape {image.shape}"
        )
    c, h, w = image.shape
    clamped = np.clip(image, 0.0, 1.0)
    bytes_img = np.floor(clamped * 255.0 + 0.5).astype(np.uint8)
    header = (f"P6\n{w} {h}\n255\n" if c == 3 else f"P5\n{w} {h}\n255\n").encode()
    body = bytes_img.transpose(1, 2, 0).tobytes() if c == 3 else bytes_img.tobytes()
    with open(path, "wb") as fh:
        fh.write(header + body)
