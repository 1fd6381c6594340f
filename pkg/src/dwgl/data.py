"""Datasets: a deterministic synthetic texture set and the CIFAR-10 binary format.

Synthetic images are class-conditional oriented gratings (one spatial
frequency + orientation pair per class, with a per-channel phase offset) plus
Gaussian pixel noise, clipped to [-1, 1]. Generation is fully determined by
the seed.

CIFAR-10 batches are records of 3073 bytes: one label byte then 3072 pixel
bytes (R, G, B planes, row-major 32x32). Pixels map affinely to [-1, 1] with
byte 0 -> -1 and byte 255 -> +1 exactly.
"""

import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .errors import ConfigError, FormatError

RECORD_BYTES = 3073
PIXELS_PER_IMAGE = 3072


@dataclass
class Dataset:
    images: np.ndarray          # float32 (N, C, H, W) in [-1, 1]
    labels: np.ndarray          # int64 (N,)
    classes: int
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ConfigError("image/label count mismatch",
                              images=len(self.images), labels=len(self.labels))
        if self.labels.size and not (0 <= self.labels.min() and self.labels.max() < self.classes):
            raise ConfigError("label outside [0, classes)", classes=self.classes)


def class_template(c, classes, size):
    """Noise-free grating for class ``c``: float32 (3, size, size)."""
    freq = 2.0 + (c % 3)
    theta = np.pi * c / classes
    u = np.arange(size, dtype=np.float64)[None, :] / size
    v = np.arange(size, dtype=np.float64)[:, None] / size
    proj = u * np.cos(theta) + v * np.sin(theta)
    planes = [0.8 * np.sin(2.0 * np.pi * freq * proj + ch * np.pi / 3.0) for ch in range(3)]
    return np.stack(planes).astype(np.float32)


def synth_generate(classes, per_class, size=16, seed=0, noise=0.1):
    """Seeded oriented-texture dataset with ``classes * per_class`` images."""
    if classes < 2:
        raise ConfigError("need at least 2 classes", classes=classes)
    rng = np.random.default_rng(seed)
    templates = np.stack([class_template(c, classes, size) for c in range(classes)])
    n = classes * per_class
    labels = np.repeat(np.arange(classes, dtype=np.int64), per_class)
    images = templates[labels].astype(np.float64)
    if noise:
        images = images + rng.normal(0.0, noise, size=images.shape)
    images = np.clip(images, -1.0, 1.0).astype(np.float32)
    order = rng.permutation(n)
    return Dataset(images=np.ascontiguousarray(images[order]), labels=labels[order],
                   classes=classes,
                   meta={"kind": "synth", "seed": seed, "noise": noise, "size": size})


def save_cache(path, ds):
    """Cache a dataset as a tensor container (images, labels, class count)."""
    checkpoint.save_tensors(path, {
        "images": ds.images,
        "labels": ds.labels.astype(np.float32),
        "classes": np.float32(ds.classes),
    })


def load_cache(path):
    t = checkpoint.load_tensors(path)
    return Dataset(images=t["images"], labels=t["labels"].astype(np.int64),
                   classes=int(t["classes"].reshape(-1)[0]),
                   meta={"kind": "cache", "path": str(path)})


def parse_cifar_batch(path):
    """Parse one CIFAR-10 binary batch file into (images, labels)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) % RECORD_BYTES != 0:
        raise FormatError("short CIFAR-10 record", path=str(path),
                          offset=len(buf) - len(buf) % RECORD_BYTES)
    n = len(buf) // RECORD_BYTES
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = raw[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError("label byte out of range", path=str(path),
                          offset=int(bad[0]) * RECORD_BYTES, label=int(labels[bad[0]]))
    pixels = raw[:, 1:].reshape(n, 3, 32, 32)
    # affine map fixed so 0 -> -1 and 255 -> +1 exactly
    images = (pixels.astype(np.float32) / np.float32(127.5)) - np.float32(1.0)
    return images, labels


def load_cifar10(directory, split="train"):
    """Load the standard binary batches from ``directory``."""
    if split == "train":
        names = [f"data_batch_{i}.bin" for i in range(1, 6)]
    elif split == "test":
        names = ["test_batch.bin"]
    else:
        raise ConfigError("unknown split", split=split)
    paths = [os.path.join(directory, n) for n in names]
    missing = [p for p in paths if not os.path.exists(p)]
    if missing:
        raise ConfigError("CIFAR-10 batch file missing", path=missing[0])
    parts = [parse_cifar_batch(p) for p in paths]
    images = np.concatenate([im for im, _ in parts])
    labels = np.concatenate([lb for _, lb in parts])
    return Dataset(images=images, labels=labels, classes=10,
                   meta={"kind": "cifar10", "dir": str(directory), "split": split})


def holdout_split(ds, fraction=0.1, seed=0):
    """Seeded shuffle split; returns (train indices, held-out indices)."""
    n = len(ds)
    k = max(1, int(round(n * fraction)))
    order = np.random.default_rng(seed).permutation(n)
    return np.sort(order[k:]), np.sort(order[:k])
