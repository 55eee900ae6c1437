"""Labeled image datasets: seeded synthetic patterns and the CIFAR-10 binary format."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

CIFAR_RECORD = 3073
CIFAR_SHAPE = (32, 32, 3)
CONTRAST = 0.15


class DataFormatError(ValueError):
    """A data file does not follow the expected record layout."""


@dataclass
class LabeledDataset:
    """Images ``(S, M, N, L)`` with integer labels in ``[0, class_count)``."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be (S, M, N, L), got {self.images.shape}")
        if self.labels.shape != (len(self.images),):
            raise ValueError("one label per image required")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if self.split not in ("train", "test"):
            raise ValueError(f"unknown split {self.split!r}")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return self.images[i], int(self.labels[i])

    @property
    def shape(self):
        return self.images.shape[1:]

    def subset(self, idx):
        return LabeledDataset(self.images[idx], self.labels[idx], self.class_count, self.split)


def class_templates(classes, shape, template_seed=0, contrast=CONTRAST):
    """One noiseless pattern per class: oriented bars for even classes, checkerboards for odd ones."""
    m, n, l = shape
    rng = np.random.default_rng(template_seed)
    v, u = np.meshgrid(np.arange(n) / n, np.arange(m) / m)
    out = np.empty((classes, m, n, l))
    for c in range(classes):
        theta = np.pi * c / classes + rng.uniform(-0.1, 0.1)
        freq = rng.uniform(2.0, 5.0)
        phase = rng.uniform(0, 2 * np.pi)
        along = u * np.cos(theta) + v * np.sin(theta)
        wave = np.sin(2 * np.pi * freq * along + phase)
        if c % 2:
            across = -u * np.sin(theta) + v * np.cos(theta)
            wave = wave * np.sin(2 * np.pi * freq * across + phase)
        color = rng.uniform(0.3, 1.0, size=l)
        out[c] = 0.5 + contrast * wave[..., None] * color
    return out


def synth_dataset(classes, per_class, shape=CIFAR_SHAPE, seed=0, noise=0.3,
                  template_seed=0, split="train", contrast=CONTRAST) -> LabeledDataset:
    """Class templates plus i.i.d. Gaussian noise, clamped to [0, 1].

    Templates depend only on ``template_seed`` so that train and test
    splits drawn with different ``seed`` values share their classes.
    Samples are interleaved by class.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    templates = class_templates(classes, shape, template_seed, contrast)
    rng = np.random.default_rng(seed)
    labels = np.tile(np.arange(classes), per_class)
    images = templates[labels] + noise * rng.standard_normal((len(labels), *shape))
    return LabeledDataset(np.clip(images, 0.0, 1.0), labels, classes, split)


def synth_split(n_train_per_class=200, n_test_per_class=50, classes=10,
                shape=CIFAR_SHAPE, seed=0, noise=0.3, contrast=CONTRAST):
    """Train/test pair over shared templates; the test noise uses ``seed + 1``."""
    return (synth_dataset(classes, n_train_per_class, shape, seed, noise, split="train",
                          contrast=contrast),
            synth_dataset(classes, n_test_per_class, shape, seed + 1, noise, split="test",
                          contrast=contrast))


def load_cifar10_binary(path, split="train") -> LabeledDataset:
    """Read a CIFAR-10 binary batch: records of 1 label byte + 1024 R, G, B bytes each."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % CIFAR_RECORD:
        raise DataFormatError(
            f"{path}: size {raw.size} is not a multiple of {CIFAR_RECORD}-byte records")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise DataFormatError(f"{path}: label byte {labels.max()} out of range 0..9")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1) / 255.0
    return LabeledDataset(images, labels, 10, split)


def write_cifar10_binary(path, dataset: LabeledDataset) -> None:
    """Write images in [0, 1] back to the binary record format (rounded to bytes)."""
    if dataset.shape != CIFAR_SHAPE:
        raise ValueError(f"CIFAR-10 records hold {CIFAR_SHAPE} images, got {dataset.shape}")
    px = np.rint(np.clip(dataset.images, 0, 1) * 255).astype(np.uint8)
    rec = np.empty((len(dataset), CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = dataset.labels
    rec[:, 1:] = px.transpose(0, 3, 1, 2).reshape(len(dataset), -1)
    rec.tofile(path)


def load_cifar10_dir(root):
    """``data_batch_1..5`` as train and ``test_batch`` as test from an extracted archive."""
    names = [f"data_batch_{i}.bin" for i in range(1, 6)]
    parts = [load_cifar10_binary(os.path.join(root, n)) for n in names
             if os.path.exists(os.path.join(root, n))]
    if not parts:
        raise FileNotFoundError(f"no data_batch_*.bin files under {root}")
    train = LabeledDataset(np.concatenate([p.images for p in parts]),
                           np.concatenate([p.labels for p in parts]), 10, "train")
    test = load_cifar10_binary(os.path.join(root, "test_batch.bin"), split="test")
    return train, test


def channel_normalize(dataset: LabeledDataset, means=None):
    """Subtract per-channel means (computed from the data unless given).

    Returns:
        (normalized dataset, means); :func:`channel_denormalize` inverts it.
    """
    if means is None:
        means = dataset.images.mean(axis=(0, 1, 2))
    means = np.asarray(means, dtype=np.float64)
    return (LabeledDataset(dataset.images - means, dataset.labels, dataset.class_count,
                           dataset.split), means)


def channel_denormalize(dataset: LabeledDataset, means):
    return LabeledDataset(dataset.images + np.asarray(means), dataset.labels,
                          dataset.class_count, dataset.split)
