"""CIFAR binary-format loading, preprocessing and seeded batching.

Record layouts (one record per image, pixels as 1024 R, 1024 G, 1024 B bytes
in row-major order):

    cifar10:  <label:u8> <3072 pixel bytes>                 3073 bytes
    cifar100: <coarse:u8> <fine:u8> <3072 pixel bytes>      3074 bytes
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch

from .channel import stream_rng

PIXELS = 3 * 32 * 32
DATA_ROOT_ENV = "EWIR_DATA_ROOT"

_VARIANTS = {
    "cifar10": dict(record=PIXELS + 1, classes=10, dirs=("cifar-10-batches-bin", "."),
                    train=[f"data_batch_{i}.bin" for i in range(1, 6)], test=["test_batch.bin"]),
    "cifar100": dict(record=PIXELS + 2, classes=100, dirs=("cifar-100-binary", "."),
                     train=["train.bin"], test=["test.bin"]),
}


class DatasetError(ValueError):
    pass


@dataclass
class ImageSet:
    images: np.ndarray  # uint8 (N, 3, 32, 32)
    labels: np.ndarray  # int64 (N,)
    num_classes: int
    coarse: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, n: int) -> "ImageSet":
        if n <= 0 or n >= len(self):
            return self
        coarse = None if self.coarse is None else self.coarse[:n]
        return ImageSet(self.images[:n], self.labels[:n], self.num_classes, coarse)


def parse_records(blob: bytes, variant: str, source: str = "<bytes>") -> ImageSet:
    spec = _VARIANTS[variant]
    size = spec["record"]
    if len(blob) % size:
        good = len(blob) - len(blob) % size
        raise DatasetError(f"{source}: truncated or mis-sized {variant} record at byte offset {good} "
                           f"({len(blob)} bytes is not a multiple of {size})")
    raw = np.frombuffer(blob, dtype=np.uint8).reshape(-1, size)
    head = size - PIXELS
    labels = raw[:, head - 1].astype(np.int64)
    bad = np.flatnonzero(labels >= spec["classes"])
    if bad.size:
        raise DatasetError(f"{source}: label {labels[bad[0]]} out of range at byte offset "
                           f"{bad[0] * size + head - 1}")
    coarse = raw[:, 0].astype(np.int64) if head == 2 else None
    images = raw[:, head:].reshape(-1, 3, 32, 32).copy()
    return ImageSet(images, labels, spec["classes"], coarse)


def _concat(parts: Sequence[ImageSet]) -> ImageSet:
    coarse = None if parts[0].coarse is None else np.concatenate([p.coarse for p in parts])
    return ImageSet(np.concatenate([p.images for p in parts]),
                    np.concatenate([p.labels for p in parts]), parts[0].num_classes, coarse)


def resolve_root(root: str | Path | None) -> Path:
    root = root or os.environ.get(DATA_ROOT_ENV)
    if not root:
        raise DatasetError(f"no dataset root given and ${DATA_ROOT_ENV} is unset")
    return Path(root)


def load_cifar(root: str | Path | None, variant: str = "cifar100",
               expect_counts: tuple[int, int] | None = (50_000, 10_000)) -> tuple[ImageSet, ImageSet]:
    """Load (train, test) from the binary distribution under ``root``."""
    if variant not in _VARIANTS:
        raise DatasetError(f"unknown variant {variant!r}")
    spec = _VARIANTS[variant]
    root = resolve_root(root)
    base = next((root / d for d in spec["dirs"] if (root / d / spec["test"][0]).exists()), None)
    if base is None:
        raise DatasetError(f"{variant} binary files not found under {root}")
    out = []
    for split in ("train", "test"):
        parts = [parse_records((base / f).read_bytes(), variant, str(base / f)) for f in spec[split]]
        out.append(_concat(parts))
    if expect_counts is not None:
        for s, want, name in zip(out, expect_counts, ("train", "test")):
            if len(s) != want:
                raise DatasetError(f"{variant} {name} split has {len(s)} records, expected {want}")
    return out[0], out[1]


def write_cifar(path: str | Path, images: np.ndarray, labels: np.ndarray, variant: str = "cifar10",
                coarse: np.ndarray | None = None) -> None:
    """Write records in the binary layout (inverse of :func:`parse_records`)."""
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), PIXELS)
    cols = [np.asarray(labels, dtype=np.uint8)[:, None]]
    if variant == "cifar100":
        c = np.zeros(len(labels), np.uint8) if coarse is None else np.asarray(coarse, np.uint8)
        cols.insert(0, c[:, None])
    Path(path).write_bytes(np.concatenate(cols + [images], axis=1).tobytes())


def channel_stats(images: np.ndarray) -> tuple[tuple[float, ...], tuple[float, ...]]:
    """Per-channel mean and std of pixels scaled to [0, 1]."""
    x = images.astype(np.float64) / 255.0
    mean = x.mean(axis=(0, 2, 3))
    std = x.std(axis=(0, 2, 3))
    return tuple(round(float(m), 6) for m in mean), tuple(round(float(s), 6) for s in std)


def augment(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random pad-and-crop plus horizontal flip on a uint8 batch."""
    n, _, h, w = images.shape
    offsets = rng.integers(0, 2 * pad + 1, size=(n, 2))
    flips = rng.random(n) < 0.5
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty_like(images)
    for i in range(n):
        dy, dx = offsets[i]
        crop = padded[i, :, dy:dy + h, dx:dx + w]
        out[i] = crop[:, :, ::-1] if flips[i] else crop
    return out


def to_tensor(images: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> torch.Tensor:
    x = torch.from_numpy(images.astype(np.float32) / np.float32(255.0))
    m = torch.tensor(mean, dtype=torch.float32).view(1, 3, 1, 1)
    s = torch.tensor(std, dtype=torch.float32).view(1, 3, 1, 1)
    return (x - m) / s


def preprocess(image: np.ndarray, mode: str, rng: np.random.Generator | None,
               mean: Sequence[float], std: Sequence[float], augmentation: bool = True) -> torch.Tensor:
    """One uint8 (3, 32, 32) image -> normalized float tensor (3, 32, 32)."""
    batch = np.asarray(image, dtype=np.uint8)[None]
    if mode == "train" and augmentation:
        if rng is None:
            raise ValueError("train-mode preprocessing needs an rng stream")
        batch = augment(batch, rng)
    return to_tensor(batch, mean, std)[0]


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return stream_rng(seed, (0, epoch)).permutation(n)


def batch_iter(data: ImageSet, batch_size: int, seed: int, epoch: int = 0, *, shuffle: bool = True,
               augmentation: bool = False, mean: Sequence[float] = (0.5, 0.5, 0.5),
               std: Sequence[float] = (0.25, 0.25, 0.25)
               ) -> Iterator[tuple[torch.Tensor, torch.Tensor, np.ndarray]]:
    """Yield (images, labels, dataset indices); the final short batch is kept.

    Order and augmentation draws depend only on (seed, epoch, batch index).
    """
    order = epoch_order(len(data), seed, epoch) if shuffle else np.arange(len(data))
    for b, lo in enumerate(range(0, len(order), batch_size)):
        idx = order[lo:lo + batch_size]
        imgs = data.images[idx]
        if augmentation:
            imgs = augment(imgs, stream_rng(seed, (1, epoch, b)))
        yield to_tensor(imgs, mean, std), torch.from_numpy(data.labels[idx]), idx
