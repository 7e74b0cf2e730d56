"""Datasets: IDX (big-endian) image/label files, synthetic 2-D sets, and an
optional CIFAR-10 binary loader.

All images are float64 scaled to [0, 1] with shape (N, C, H, W); labels are
int64 class indices. Synthetic generators are deterministic functions of
their seed.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import DataFormatError

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class Dataset:
    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    input_shape: tuple
    n_classes: int

    def __post_init__(self):
        for x, y, split in ((self.x_train, self.y_train, "train"), (self.x_test, self.y_test, "test")):
            if x.shape[0] != y.shape[0]:
                raise DataFormatError(
                    f"{self.name} {split} split: {x.shape[0]} images but {y.shape[0]} labels"
                )

    def subsample(self, n_train=None, n_test=None) -> "Dataset":
        """First-n deterministic subsets of each split."""
        n_tr = self.x_train.shape[0] if n_train is None else min(int(n_train), self.x_train.shape[0])
        n_te = self.x_test.shape[0] if n_test is None else min(int(n_test), self.x_test.shape[0])
        return Dataset(
            self.name,
            self.x_train[:n_tr], self.y_train[:n_tr],
            self.x_test[:n_te], self.y_test[:n_te],
            self.input_shape, self.n_classes,
        )


def _open_maybe_gzip(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n: int, path, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise DataFormatError(f"{path}: truncated file while reading {what} ({len(buf)} of {n} bytes)")
    return buf


def load_idx(path) -> np.ndarray:
    """Read one big-endian IDX file of unsigned bytes.

    Accepts the 3-D image layout (magic 0x00000803) and the 1-D label layout
    (magic 0x00000801). Raises DataFormatError with a distinct message for a
    bad magic number versus a truncated file.
    """
    with _open_maybe_gzip(path) as f:
        (magic,) = struct.unpack(">I", _read_exact(f, 4, path, "magic number"))
        if magic == IDX_MAGIC_IMAGES:
            n, h, w = struct.unpack(">III", _read_exact(f, 12, path, "image header"))
            raw = _read_exact(f, n * h * w, path, f"{n} images of {h}x{w}")
            return np.frombuffer(raw, dtype=np.uint8).reshape(n, h, w)
        if magic == IDX_MAGIC_LABELS:
            (n,) = struct.unpack(">I", _read_exact(f, 4, path, "label header"))
            raw = _read_exact(f, n, path, f"{n} labels")
            return np.frombuffer(raw, dtype=np.uint8)
        raise DataFormatError(
            f"{path}: bad magic number 0x{magic:08x} "
            f"(expected 0x{IDX_MAGIC_IMAGES:08x} for images or 0x{IDX_MAGIC_LABELS:08x} for labels)"
        )


def _find_idx_file(directory, stem: str):
    for candidate in (stem, stem + ".gz"):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    return None


def default_mnist_dir() -> str:
    return os.environ.get("CACTUS_MNIST_DIR", os.path.join("data", "mnist"))


def mnist_available(directory=None) -> bool:
    directory = default_mnist_dir() if directory is None else directory
    return all(_find_idx_file(directory, stem) is not None for stem in MNIST_FILES.values())


def load_mnist(directory=None) -> Dataset:
    """Load the four canonical IDX files (optionally gzipped) from a directory."""
    directory = default_mnist_dir() if directory is None else directory
    paths = {}
    for key, stem in MNIST_FILES.items():
        path = _find_idx_file(directory, stem)
        if path is None:
            raise FileNotFoundError(
                f"MNIST file {stem}[.gz] not found in {directory!r}; "
                "set CACTUS_MNIST_DIR or pass the directory explicitly"
            )
        paths[key] = path

    def images(key):
        arr = load_idx(paths[key])
        if arr.ndim != 3:
            raise DataFormatError(f"{paths[key]}: expected image data, found label layout")
        return (arr.astype(np.float64) / 255.0).reshape(arr.shape[0], 1, arr.shape[1], arr.shape[2])

    def labels(key):
        arr = load_idx(paths[key])
        if arr.ndim != 1:
            raise DataFormatError(f"{paths[key]}: expected label data, found image layout")
        return arr.astype(np.int64)

    x_train, y_train = images("train_images"), labels("train_labels")
    x_test, y_test = images("test_images"), labels("test_labels")
    return Dataset("mnist", x_train, y_train, x_test, y_test, (1, 28, 28), 10)


BLOB_CENTERS = np.array([[0.25, 0.25], [0.75, 0.75]])


def _balanced_labels(n: int) -> np.ndarray:
    y = np.zeros(n, dtype=np.int64)
    y[n // 2 :] = 1
    return y


def make_synthetic(kind: str, n: int = 1000, noise: float = 0.05, seed: int = 0) -> Dataset:
    """Two-class 2-D dataset in [0,1]^2 with n train and n//2 test samples.

    blobs: two isotropic Gaussians at (0.25, 0.25) and (0.75, 0.75) with
    standard deviation `noise`, clipped to the unit square — noise 0 puts
    every point exactly on its center. moons: two interleaved half-circles
    rescaled into the unit square with Gaussian coordinate noise, clipped.
    """
    if kind not in ("blobs", "moons"):
        raise ValueError(f"unknown synthetic dataset kind {kind!r}")
    if n < 2:
        raise ValueError(f"need n >= 2, got {n}")
    rng = np.random.default_rng(seed)
    n_test = n // 2
    total = n + n_test
    y = _balanced_labels(total)

    if kind == "blobs":
        x = BLOB_CENTERS[y] + rng.normal(0.0, noise, size=(total, 2))
    else:
        t = np.empty(total)
        n0 = total - y.sum()
        t[:n0] = np.linspace(0.0, np.pi, n0)
        t[n0:] = np.linspace(0.0, np.pi, total - n0)
        x = np.empty((total, 2))
        x[:n0, 0] = np.cos(t[:n0])
        x[:n0, 1] = np.sin(t[:n0])
        x[n0:, 0] = 1.0 - np.cos(t[n0:])
        x[n0:, 1] = 0.5 - np.sin(t[n0:])
        x += rng.normal(0.0, noise, size=x.shape)
        x[:, 0] = (x[:, 0] + 1.0) / 3.0
        x[:, 1] = (x[:, 1] + 0.5) / 1.5

    x = np.clip(x, 0.0, 1.0)
    perm = rng.permutation(total)
    x, y = x[perm], y[perm]
    return Dataset(kind, x[:n], y[:n], x[n:], y[n:], (2,), 2)


CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar10(directory) -> Dataset:
    """Binary-format CIFAR-10 (data_batch_1..5.bin + test_batch.bin)."""
    def read_batches(names):
        xs, ys = [], []
        for name in names:
            path = os.path.join(directory, name)
            if not os.path.exists(path):
                raise FileNotFoundError(f"CIFAR-10 file {name} not found in {directory!r}")
            raw = np.fromfile(path, dtype=np.uint8)
            if raw.size == 0 or raw.size % CIFAR_RECORD != 0:
                raise DataFormatError(
                    f"{path}: size {raw.size} is not a multiple of the {CIFAR_RECORD}-byte record"
                )
            rec = raw.reshape(-1, CIFAR_RECORD)
            ys.append(rec[:, 0].astype(np.int64))
            xs.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
        return np.concatenate(xs), np.concatenate(ys)

    x_train, y_train = read_batches([f"data_batch_{i}.bin" for i in range(1, 6)])
    x_test, y_test = read_batches(["test_batch.bin"])
    return Dataset("cifar10", x_train, y_train, x_test, y_test, (3, 32, 32), 10)
