"""Datasets: IDX / CIFAR-10 binary parsing, a bundled MNIST subset, synthetic blobs,
stratified subsampling, per-channel normalization and label corruption.

All arrays are held in memory; image inputs are (N, C, H, W) float64, vector inputs (N, d).
"""
from __future__ import annotations

import dataclasses
import functools
import gzip
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 1 + 3072

MNIST_DIR_ENV = "PERMBASIN_MNIST_DIR"


class IdxFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    train_x: np.ndarray
    train_y: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    num_classes: int
    norm_stats: tuple[np.ndarray, np.ndarray] | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("train_y", "test_y"):
            y = getattr(self, name)
            if len(y) and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError(f"{name} outside [0, {self.num_classes})")
        if len(self.train_x) != len(self.train_y) or len(self.test_x) != len(self.test_y):
            raise ValueError("inputs and labels differ in length")

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == "train":
            return self.train_x, self.train_y
        if name == "test":
            return self.test_x, self.test_y
        raise ValueError(f"unknown split {name!r}")

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.train_x.shape[1:])

    @property
    def in_dim(self) -> int:
        return int(np.prod(self.input_shape))


# ---------------------------------------------------------------------------
# IDX


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def parse_idx(raw: bytes, expected_magic: int) -> np.ndarray:
    """Parse an unsigned-byte IDX buffer; returns a uint8 array with the declared dims."""
    if len(raw) < 4:
        raise IdxFormatError("truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError("truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header < count:
        raise IdxFormatError(f"truncated IDX payload: {len(raw) - header} of {count} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def idx_bytes(array: np.ndarray) -> bytes:
    """Serialize a uint8 array as IDX (images if 3-D, labels if 1-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label file pair (optionally gzipped).

    Returns images as (N, 1, rows, cols) float64 in [0, 1] and labels as int64.
    """
    with _open(images_path) as f:
        images = parse_idx(f.read(), IDX_IMAGES_MAGIC)
    with _open(labels_path) as f:
        labels = parse_idx(f.read(), IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise IdxFormatError(f"{len(images)} images but {len(labels)} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return x, labels.astype(np.int64)


def load_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    """One CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes."""
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise IdxFormatError(f"CIFAR batch size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return x, rec[:, 0].astype(np.int64)


# ---------------------------------------------------------------------------
# sources


def _stratified_indices(y: np.ndarray, n: int, rng: np.random.Generator, num_classes: int) -> np.ndarray:
    counts = np.bincount(y, minlength=num_classes)
    quota = n * counts / counts.sum()
    take = np.floor(quota).astype(int)
    # largest remainder, ties to the lower class index
    rest = n - take.sum()
    order = np.lexsort((np.arange(num_classes), -(quota - take)))
    take[order[:rest]] += 1
    chosen = []
    for c in range(num_classes):
        members = np.flatnonzero(y == c)
        if take[c] > len(members):
            raise ValueError(f"class {c} has {len(members)} examples, {take[c]} requested")
        chosen.append(rng.choice(members, size=take[c], replace=False))
    return np.sort(np.concatenate(chosen))


def mnist_5k(n_train: int = 4096, seed: int = 0) -> Dataset:
    """The 5000-image MNIST subset shipped with ``mlxtend`` (500 per class).

    A stratified ``n_train`` split is drawn; the remaining images form the test split.
    """
    from mlxtend.data import mnist_data

    x, y = mnist_data()
    x = (x / 255.0).reshape(-1, 1, 28, 28)
    y = y.astype(np.int64)
    if not 0 < n_train < len(y):
        raise ValueError(f"n_train must lie in (0, {len(y)})")
    rng = np.random.default_rng(seed)
    train_idx = _stratified_indices(y, n_train, rng, 10)
    test_mask = np.ones(len(y), bool)
    test_mask[train_idx] = False
    return Dataset(x[train_idx], y[train_idx], x[test_mask], y[test_mask], 10,
                   provenance={"source": "mlxtend.mnist_5k", "split_seed": seed})


def mnist_idx(directory) -> Dataset:
    d = Path(directory)

    def find(stem):
        for name in (stem, stem + ".gz"):
            if (d / name).exists():
                return d / name
        raise FileNotFoundError(d / stem)

    trx, try_ = load_idx(find("train-images-idx3-ubyte"), find("train-labels-idx1-ubyte"))
    tex, tey = load_idx(find("t10k-images-idx3-ubyte"), find("t10k-labels-idx1-ubyte"))
    return Dataset(trx, try_, tex, tey, 10, provenance={"source": f"idx:{d}"})


def cifar10(directory) -> Dataset:
    d = Path(directory)
    parts = [load_cifar_batch(d / f"data_batch_{i}.bin") for i in range(1, 6)]
    tex, tey = load_cifar_batch(d / "test_batch.bin")
    return Dataset(np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts]),
                   tex, tey, 10, provenance={"source": f"cifar10:{d}"})


def _simplex(classes: int, d: int, seed: int) -> np.ndarray:
    verts = np.eye(classes) - 1.0 / classes
    if classes > 1:
        verts /= np.linalg.norm(verts[0])
    if d >= classes:
        out = np.zeros((classes, d))
        out[:, :classes] = verts
        return out
    # fewer dims than classes: fixed orthonormal projection of the simplex
    q, _ = np.linalg.qr(np.random.default_rng(seed).standard_normal((classes, d)))
    return verts @ q


def synth_blobs(n: int, d: int, classes: int, separation: float, seed: int) -> Dataset:
    """Balanced class-conditional unit Gaussians centred on a simplex scaled by ``separation``.

    80/20 train/test split.
    """
    if classes < 1 or d < 1 or n < classes:
        raise ValueError("need n >= classes >= 1 and d >= 1")
    if separation < 0:
        raise ValueError("separation must be non-negative")
    rng = np.random.default_rng(seed)
    means = separation * _simplex(classes, d, seed)
    y = rng.permutation(np.arange(n) % classes)
    x = means[y] + rng.standard_normal((n, d))
    n_test = n // 5
    return Dataset(x[n_test:], y[n_test:], x[:n_test], y[:n_test], classes,
                   provenance={"source": "blobs", "n": n, "d": d, "classes": classes,
                               "separation": separation, "seed": seed})


# ---------------------------------------------------------------------------
# transforms


def subsample(ds: Dataset, n_train: int, n_test: int, seed: int) -> Dataset:
    """Class-stratified subsample of both splits (original order preserved)."""
    if n_train > len(ds.train_y) or n_test > len(ds.test_y):
        raise ValueError("requested subsample exceeds available examples")
    rng = np.random.default_rng(seed)
    tr = _stratified_indices(ds.train_y, n_train, rng, ds.num_classes)
    te = _stratified_indices(ds.test_y, n_test, rng, ds.num_classes)
    prov = dict(ds.provenance, subsample={"n_train": n_train, "n_test": n_test, "seed": seed})
    return dataclasses.replace(ds, train_x=ds.train_x[tr], train_y=ds.train_y[tr],
                               test_x=ds.test_x[te], test_y=ds.test_y[te], provenance=prov)


def normalize(ds: Dataset) -> Dataset:
    """Standardize each channel with mean/std computed on the train split."""
    axes = (0, 2, 3) if ds.train_x.ndim == 4 else (0,)
    mean = ds.train_x.mean(axis=axes, keepdims=True)
    std = ds.train_x.std(axis=axes, keepdims=True)
    std = np.where(std > 1e-12, std, 1.0)
    return dataclasses.replace(
        ds,
        train_x=(ds.train_x - mean) / std,
        test_x=(ds.test_x - mean) / std,
        norm_stats=(mean.ravel(), std.ravel()),
        provenance=dict(ds.provenance, normalized=True),
    )


def corrupt_labels(ds: Dataset, fraction: float, seed: int) -> Dataset:
    """Replace the labels of exactly round(fraction * n_train) train examples by a
    uniformly drawn *different* class. Test split untouched."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    n = len(ds.train_y)
    k = int(np.floor(fraction * n + 0.5))
    if k == 0:
        return ds
    rng = np.random.default_rng(seed)
    idx = rng.choice(n, size=k, replace=False)
    y = ds.train_y.copy()
    y[idx] = (y[idx] + rng.integers(1, ds.num_classes, size=k)) % ds.num_classes
    prov = dict(ds.provenance, corrupted={"fraction": fraction, "count": k, "seed": seed})
    return dataclasses.replace(ds, train_y=y, provenance=prov)


# ---------------------------------------------------------------------------
# descriptors


def load_dataset(desc: dict) -> Dataset:
    """Build a dataset from a JSON-able descriptor (memoized).

    ``{"name": "mnist", "n_train": 4096, "n_test": 904, "seed": 0, "normalize": true,
    "noise": 0.0, "noise_seed": 0}`` or ``{"name": "blobs", "n": .., "d": .., "classes": ..,
    "separation": .., "seed": ..}``.
    """
    return _load_cached(json.dumps(desc, sort_keys=True))


@functools.lru_cache(maxsize=16)
def _load_cached(key: str) -> Dataset:
    desc = json.loads(key)
    name = desc["name"]
    seed = int(desc.get("seed", 0))
    if name == "mnist":
        n_train = int(desc.get("n_train", 4096))
        directory = desc.get("idx_dir") or os.environ.get(MNIST_DIR_ENV)
        if directory:
            ds = mnist_idx(directory)
            ds = subsample(ds, n_train, int(desc.get("n_test", 1024)), seed)
        else:
            ds = mnist_5k(n_train, seed)
            if desc.get("n_test") is not None and int(desc["n_test"]) < len(ds.test_y):
                ds = subsample(ds, n_train, int(desc["n_test"]), seed)
    elif name == "blobs":
        ds = synth_blobs(int(desc["n"]), int(desc["d"]), int(desc["classes"]),
                         float(desc["separation"]), seed)
    elif name == "cifar10":
        ds = subsample(cifar10(desc["dir"]), int(desc["n_train"]), int(desc["n_test"]), seed)
    else:
        raise ValueError(f"unknown dataset {name!r}")
    if desc.get("normalize", True):
        ds = normalize(ds)
    if desc.get("noise", 0.0):
        ds = corrupt_labels(ds, float(desc["noise"]), int(desc.get("noise_seed", seed)))
    return dataclasses.replace(ds, provenance=dict(ds.provenance, descriptor=desc))
