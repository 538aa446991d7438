"""Datasets, augmentation and mini-batching.

CIFAR-10 is read from the binary distribution (``data_batch_{1..5}.bin`` and
``test_batch.bin``; one label byte then 3072 pixel bytes per record, R, G and
B planes in row-major order). A synthetic Gaussian dataset stands in when
CIFAR-10 is not available.
"""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_BATCH_BYTES = 10000 * CIFAR_RECORD  # 30,730,000
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


class DataError(OSError):
    pass


@dataclass
class Dataset:
    images: np.ndarray      # N x C x H x W, float32 in [0, 1] for CIFAR-10
    labels: np.ndarray      # N, int64
    split: str = "train"
    classes: int = 10
    mean: np.ndarray | None = None  # per-channel normalisation constants (from the train split)
    std: np.ndarray | None = None
    class_means: np.ndarray | None = None  # synthetic data only
    sigma: float | None = None

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise ValueError(f"labels outside [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.images.shape[1:])


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.astype(np.float64)
    return x.mean(axis=(0, 2, 3)), x.std(axis=(0, 2, 3))


def _read_cifar_file(path: Path):
    if not path.is_file():
        raise DataError(f"missing CIFAR-10 file {path} (expected {CIFAR_BATCH_BYTES} bytes)")
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size != CIFAR_BATCH_BYTES:
        raise DataError(f"{path} has {raw.size} bytes, expected {CIFAR_BATCH_BYTES}")
    rec = raw.reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / np.float32(255)
    return images, labels


def find_cifar10(root=None) -> Path | None:
    """Locate the binary CIFAR-10 directory under ``root`` or ``$PETRA_DATA_DIR``."""
    candidates = []
    for base in (root, os.environ.get("PETRA_DATA_DIR")):
        if base:
            base = Path(base)
            candidates += [base, base / "cifar-10-batches-bin", base / "cifar10" / "cifar-10-batches-bin"]
    for c in candidates:
        if (c / CIFAR_TEST_FILE).is_file():
            return c
    return None


def load_cifar10(directory) -> tuple[Dataset, Dataset]:
    directory = Path(directory)
    found = find_cifar10(directory)
    if found is not None:
        directory = found
    parts = [_read_cifar_file(directory / f) for f in CIFAR_TRAIN_FILES]
    train_x = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_x, test_y = _read_cifar_file(directory / CIFAR_TEST_FILE)
    mean, std = channel_stats(train_x)
    log.info("loaded CIFAR-10 from %s: %d train, %d test", directory, len(train_y), len(test_y))
    return (Dataset(train_x, train_y, "train", 10, mean, std),
            Dataset(test_x, test_y, "test", 10, mean, std))


def subset(ds: Dataset, n: int, rng: np.random.Generator) -> Dataset:
    """A random subset of ``n`` examples; normalisation constants are kept."""
    if n > len(ds):
        raise ValueError(f"asked for {n} examples from a dataset of {len(ds)}")
    idx = np.sort(rng.permutation(len(ds))[:n])
    return replace(ds, images=ds.images[idx], labels=ds.labels[idx])


# -- synthetic data ----------------------------------------------------------------

def _class_patterns(classes, shape, rng):
    """One +-1 oriented-grating pattern per class."""
    c, h, w = shape
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    pats = np.empty((classes,) + tuple(shape))
    for k in range(classes):
        theta = math.pi * k / classes + rng.uniform(0, math.pi / classes)
        freq = rng.uniform(0.5, 1.5)
        for ch in range(c):
            phase = rng.uniform(0, 2 * math.pi)
            wave = np.cos(freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase)
            pats[k, ch] = np.where(wave >= 0, 1.0, -1.0)
    return pats


def synth_dataset(classes: int, n: int, shape=(3, 8, 8), rng=None, separation: float = 2.0, sigma: float = 1.0,
                  split: str = "train", dtype=np.float32, means=None) -> Dataset:
    """Gaussian class-conditional images.

    Class ``c`` has mean ``(separation / 2) * sigma * P_c`` where ``P_c`` is a
    +-1 grating pattern, so at every pixel where two patterns differ their
    means are ``separation * sigma`` apart. Noise is isotropic N(0, sigma^2).
    Labels are balanced to within one. Pass ``means`` (from ``class_means`` of
    a train set) to draw a test set from the same distribution.
    """
    if n < classes:
        raise ValueError("need at least one example per class")
    rng = rng if rng is not None else np.random.default_rng(0)
    if means is None:
        means = 0.5 * separation * sigma * _class_patterns(classes, shape, rng)
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)].astype(np.int64)
    images = means[labels] + sigma * rng.standard_normal((n,) + tuple(shape))
    images = images.astype(dtype)
    return Dataset(images, labels, split, classes, class_means=means, sigma=sigma)


def synth_split(classes, n_train, n_test, shape=(3, 8, 8), rng=None, separation=2.0, sigma=1.0):
    """Train and test sets sharing class means; test uses the train normalisation."""
    train = synth_dataset(classes, n_train, shape, rng, separation, sigma, "train")
    test = synth_dataset(classes, n_test, shape, rng, separation, sigma, "test", means=train.class_means)
    train.mean, train.std = channel_stats(train.images)
    test.mean, test.std = train.mean, train.std
    return train, test


def gaussian_bayes_error(mu0: np.ndarray, mu1: np.ndarray, sigma: float) -> float:
    """Error of the optimal classifier between two equiprobable isotropic Gaussians."""
    d = float(np.linalg.norm(np.ravel(mu0) - np.ravel(mu1)))
    return 0.5 * math.erfc(d / (2 * sigma) / math.sqrt(2))


# -- batching ----------------------------------------------------------------------

@dataclass
class AugmentConfig:
    hflip: bool = True
    crop_pad: int = 4       # 0 disables the random crop
    normalize: bool = True


NO_AUGMENT = AugmentConfig(hflip=False, crop_pad=0, normalize=True)


def normalize(x: np.ndarray, mean, std) -> np.ndarray:
    m = np.asarray(mean, dtype=x.dtype).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=x.dtype).reshape(1, -1, 1, 1)
    return (x - m) / s


def random_crop(x: np.ndarray, pad: int, rng) -> np.ndarray:
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oy = rng.integers(0, 2 * pad + 1, n)
    ox = rng.integers(0, 2 * pad + 1, n)
    out = np.empty_like(x)
    for i in range(n):
        out[i] = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
    return out


def random_hflip(x: np.ndarray, rng) -> np.ndarray:
    flip = rng.random(len(x)) < 0.5
    out = x.copy()
    out[flip] = out[flip][..., ::-1]
    return out


def batches(ds: Dataset, batch_size: int, augment: AugmentConfig | None = None, rng=None, drop_last: bool = True,
            shuffle: bool = True, dtype=None):
    """Yield ``(x, labels)`` mini-batches.

    Flips and crops are applied to the train split only; normalisation uses
    the dataset's stored constants.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    augment = augment or NO_AUGMENT
    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(ds)
    order = rng.permutation(n) if shuffle else np.arange(n)
    stop = (n // batch_size) * batch_size if drop_last else n
    train = ds.split == "train"
    for start in range(0, stop, batch_size):
        idx = order[start:start + batch_size]
        x = ds.images[idx]
        if train and augment.hflip:
            x = random_hflip(x, rng)
        if train and augment.crop_pad:
            x = random_crop(x, augment.crop_pad, rng)
        if augment.normalize and ds.mean is not None:
            x = normalize(x, ds.mean, ds.std)
        if dtype is not None:
            x = x.astype(dtype)
        yield np.ascontiguousarray(x), ds.labels[idx]


def num_batches(n: int, batch_size: int, drop_last: bool = True) -> int:
    return n // batch_size if drop_last else -(-n // batch_size)
