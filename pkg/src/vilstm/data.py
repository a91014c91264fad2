"""Synthetic corners task and the raw uint8 image container."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DimensionError

IMG_MAGIC = b"VILIMG1"
PALETTE_SEED = 20240101


@dataclass(frozen=True)
class SyntheticCornersDataset:
    """Images whose class is ``(top_left_marker + bottom_right_marker) mod K``.

    Each corner holds one of ``K`` fixed colour templates with a little
    pixel noise on a noisy background, so neither corner alone says
    anything about the label.
    """

    image_size: int = 32
    num_classes: int = 8
    seed: int = 0
    marker_size: int | None = None
    noise: int = 12

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("corners task needs at least 2 classes")
        m = self.marker
        if m < 1 or 2 * m > self.image_size:
            raise ConfigError(f"marker size {m} does not fit twice into {self.image_size}")

    @property
    def marker(self) -> int:
        return self.marker_size if self.marker_size is not None else max(1, self.image_size // 4)

    def templates(self) -> np.ndarray:
        """``(K, m, m, 3)`` marker patterns; depend only on ``K`` and ``m``."""
        rng = np.random.default_rng([PALETTE_SEED, self.num_classes, self.marker])
        return rng.integers(0, 256, size=(self.num_classes, self.marker, self.marker, 3)).astype(np.int16)

    def sample(self, n: int, split: int = 0) -> tuple[np.ndarray, np.ndarray]:
        """``n`` images (uint8, NHWC) and labels; labels are balanced to within one per class."""
        if n < 0:
            raise ConfigError("sample count must be non-negative")
        rng = np.random.default_rng([self.seed, split])
        K, S, m = self.num_classes, self.image_size, self.marker
        labels = rng.permutation(np.arange(n) % K)
        tl = rng.integers(0, K, size=n)
        br = (labels - tl) % K
        tpl = self.templates()
        img = rng.integers(64, 192, size=(n, S, S, 3)).astype(np.int16)
        img[:, :m, :m] = tpl[tl]
        img[:, S - m:, S - m:] = tpl[br]
        img[:, :m, :m] += rng.integers(-self.noise, self.noise + 1, size=(n, m, m, 3))
        img[:, S - m:, S - m:] += rng.integers(-self.noise, self.noise + 1, size=(n, m, m, 3))
        return np.clip(img, 0, 255).astype(np.uint8), labels.astype(np.int64)

    def decode_labels(self, images: np.ndarray) -> np.ndarray:
        """Recover labels from pixels by nearest-template matching at both corners."""
        images = np.asarray(images)
        S, m = self.image_size, self.marker
        if images.shape[1:] != (S, S, 3):
            raise DimensionError(f"expected images of shape (n, {S}, {S}, 3), got {images.shape}")
        tpl = self.templates().reshape(self.num_classes, -1).astype(np.float64)

        def nearest(block):
            flat = block.reshape(len(block), -1).astype(np.float64)
            return np.argmin(((flat[:, None, :] - tpl[None]) ** 2).sum(-1), axis=1)

        return (nearest(images[:, :m, :m]) + nearest(images[:, S - m:, S - m:])) % self.num_classes


def to_float(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Scale uint8 pixels to roughly zero mean and unit spread."""
    return ((np.asarray(images, dtype=dtype) / 255.0 - 0.5) / 0.25).astype(dtype)


def write_images(path, images: np.ndarray) -> None:
    images = np.asarray(images)
    if images.dtype != np.uint8 or images.ndim != 4:
        raise DimensionError(f"expected uint8 (n, h, w, c) images, got {images.dtype} {images.shape}")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(IMG_MAGIC + struct.pack("<4I", *images.shape))
        fh.write(np.ascontiguousarray(images).tobytes())
    os.replace(tmp, path)


def read_images(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:7] != IMG_MAGIC or len(buf) < 23:
        raise ConfigError(f"{path}: not a VILIMG1 file")
    shape = struct.unpack_from("<4I", buf, 7)
    payload = np.frombuffer(buf, dtype=np.uint8, offset=23)
    if payload.size != int(np.prod(shape)):
        raise ConfigError(f"{path}: payload holds {payload.size} bytes, header says {shape}")
    return payload.reshape(shape).copy()


def write_labels(path, labels) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in labels))


def read_labels(path) -> np.ndarray:
    return np.array([int(x) for x in Path(path).read_text().split()], dtype=np.int64)


def synthesize_dataset(out_dir, spec: SyntheticCornersDataset, n_train: int, n_eval: int) -> dict[str, Path]:
    """Write ``train``/``eval`` splits as ``<split>.vilimg`` plus ``<split>_labels.txt``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, (name, n) in enumerate((("train", n_train), ("eval", n_eval))):
        images, labels = spec.sample(n, split)
        write_images(out / f"{name}.vilimg", images)
        write_labels(out / f"{name}_labels.txt", labels)
        paths[name] = out / f"{name}.vilimg"
    return paths


def load_split(out_dir, name: str) -> tuple[np.ndarray, np.ndarray]:
    out = Path(out_dir)
    images, labels = read_images(out / f"{name}.vilimg"), read_labels(out / f"{name}_labels.txt")
    if len(images) != len(labels):
        raise ConfigError(f"{name}: {len(images)} images but {len(labels)} labels")
    return images, labels
