"""Datasets: CIFAR-10/100 binary batches, a synthetic clustered set, standardization."""
from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import Rng

C10_RECORD = 1 + 3072
C100_RECORD = 2 + 3072
C10_BATCH_RECORDS = 10_000
C10_BATCH_BYTES = C10_BATCH_RECORDS * C10_RECORD  # 30,730,000
C10_TRAIN_FILES = [f"data_batch_{k}.bin" for k in range(1, 6)]
C10_TEST_FILE = "test_batch.bin"
C100_FILES = {"train": ("train.bin", 50_000), "test": ("test.bin", 10_000)}

C10_CLASSES = ["airplane", "automobile", "bird", "cat", "deer", "dog", "frog", "horse", "ship", "truck"]

# environment variables consulted when no directory is given
CIFAR_ENV = {"c10": "CIFAR10_DIR", "c100": "CIFAR100_DIR"}
_SUBDIRS = {"c10": "cifar-10-batches-bin", "c100": "cifar-100-binary"}


class CifarFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x C float32
    labels: np.ndarray  # N int64
    class_names: list
    split: str = "train"
    mean: np.ndarray | None = None  # per-channel statistics used to standardize, if any
    std: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N x H x W x C, got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError(f"labels must lie in [0, {len(self.class_names)})")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self):
        return len(self.class_names)

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)

    def take(self, idx, split=None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names), split or self.split, self.mean, self.std)

    @property
    def valid_range(self):
        """(low, high) per channel of the pixel range [0, 1] in this dataset's coordinates."""
        if self.mean is None:
            return np.zeros(self.images.shape[-1]), np.ones(self.images.shape[-1])
        return (0.0 - self.mean) / self.std, (1.0 - self.mean) / self.std


# ---------------------------------------------------------------------------
# CIFAR binary format


def _check_size(path: Path, record: int, expected_records: int | None):
    if not path.exists():
        raise FileNotFoundError(f"missing CIFAR file: {path}")
    actual = path.stat().st_size
    if expected_records is not None:
        expected = expected_records * record
        if actual != expected:
            raise CifarFormatError(f"{path}: expected {expected:,} bytes ({expected_records} records of {record}), found {actual:,}")
    elif actual == 0 or actual % record:
        raise CifarFormatError(f"{path}: size {actual:,} bytes is not a positive multiple of the {record}-byte record")
    return actual // record


def read_cifar_file(path, variant="c10", expected_records: int | None = None):
    """One binary batch -> (uint8 images N x 32 x 32 x 3, labels, coarse labels or None)."""
    path = Path(path)
    record = C10_RECORD if variant == "c10" else C100_RECORD
    n = _check_size(path, record, expected_records)
    raw = np.fromfile(path, dtype=np.uint8).reshape(n, record)
    off = record - 3072
    # channel-planar R, G, B (each 32 x 32 row-major) -> interleaved H x W x C
    pix = raw[:, off:].reshape(n, 3, 32, 32).transpose(0, 2, 3, 1)
    if variant == "c10":
        return np.ascontiguousarray(pix), raw[:, 0].astype(np.int64), None
    return np.ascontiguousarray(pix), raw[:, 1].astype(np.int64), raw[:, 0].astype(np.int64)


def write_cifar_file(path, images_u8, labels, variant="c10", coarse=None):
    """Inverse of ``read_cifar_file``; used for fixtures and format tests."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    if images_u8.shape[1:] != (32, 32, 3):
        raise ValueError("CIFAR records are 32 x 32 x 3")
    n = len(images_u8)
    planar = images_u8.transpose(0, 3, 1, 2).reshape(n, 3072)
    lab = np.asarray(labels, dtype=np.uint8).reshape(n, 1)
    if variant == "c10":
        rows = np.concatenate([lab, planar], axis=1)
    else:
        co = np.zeros((n, 1), np.uint8) if coarse is None else np.asarray(coarse, np.uint8).reshape(n, 1)
        rows = np.concatenate([co, lab, planar], axis=1)
    Path(path).write_bytes(rows.tobytes())


def _resolve_dir(directory, variant) -> Path:
    if directory is None:
        env = os.environ.get(CIFAR_ENV[variant])
        if not env:
            raise FileNotFoundError(f"no CIFAR directory given and ${CIFAR_ENV[variant]} is not set")
        directory = env
    d = Path(directory)
    if (d / _SUBDIRS[variant]).is_dir():
        d = d / _SUBDIRS[variant]
    if not d.is_dir():
        raise FileNotFoundError(f"CIFAR directory not found: {d}")
    return d


def _class_names(d: Path, variant):
    meta = d / ("batches.meta.txt" if variant == "c10" else "fine_label_names.txt")
    if meta.exists():
        names = [ln.strip() for ln in meta.read_text().splitlines() if ln.strip()]
        if names:
            return names
    return list(C10_CLASSES) if variant == "c10" else [f"class{k}" for k in range(100)]


def load_cifar(directory=None, variant="c10", standardize=True):
    """Load the official binary release -> (train, val) Datasets.

    Pixels are scaled to [0, 1]; with ``standardize`` both splits use the
    per-channel mean/std of the training split.
    """
    if variant not in ("c10", "c100"):
        raise ValueError(f"variant must be 'c10' or 'c100', got {variant!r}")
    d = _resolve_dir(directory, variant)
    if variant == "c10":
        parts = [read_cifar_file(d / f, "c10", C10_BATCH_RECORDS) for f in C10_TRAIN_FILES]
        tr_x = np.concatenate([p[0] for p in parts])
        tr_y = np.concatenate([p[1] for p in parts])
        te_x, te_y, _ = read_cifar_file(d / C10_TEST_FILE, "c10", C10_BATCH_RECORDS)
    else:
        tr_x, tr_y, _ = read_cifar_file(d / C100_FILES["train"][0], "c100", C100_FILES["train"][1])
        te_x, te_y, _ = read_cifar_file(d / C100_FILES["test"][0], "c100", C100_FILES["test"][1])
    names = _class_names(d, variant)
    train = Dataset(tr_x.astype(np.float32) / np.float32(255), tr_y, names, "train")
    val = Dataset(te_x.astype(np.float32) / np.float32(255), te_y, names, "val")
    if standardize:
        train, val = standardize_pair(train, val)
    return train, val


# ---------------------------------------------------------------------------
# normalization and subsets


def channel_stats(images: np.ndarray):
    x = images.reshape(-1, images.shape[-1]).astype(np.float64)
    return x.mean(axis=0), x.std(axis=0)


def apply_standardization(ds: Dataset, mean, std) -> Dataset:
    if ds.mean is not None:
        raise ValueError("dataset is already standardized")
    std = np.where(std > 0, std, 1.0)
    x = ((ds.images - mean) / std).astype(np.float32)
    return Dataset(x, ds.labels, ds.class_names, ds.split, np.asarray(mean, np.float64), np.asarray(std, np.float64))


def standardize_pair(train: Dataset, *others: Dataset):
    mean, std = channel_stats(train.images)
    return tuple(apply_standardization(d, mean, std) for d in (train,) + others)


def destandardize(x, mean, std):
    """Map standardized values back to [0, 1] pixel coordinates."""
    return np.asarray(x, dtype=np.float64) * std + mean


def subset(ds: Dataset, per_class: int, seed: int = 0) -> Dataset:
    """Seeded stratified sample with ``per_class`` items of every class (original order kept)."""
    counts = ds.class_counts()
    if per_class < 0:
        raise ValueError("per_class must be >= 0")
    if per_class > counts.min():
        short = int(np.argmin(counts))
        raise ValueError(f"per_class={per_class} exceeds the {counts[short]} samples of class {short}")
    rng = Rng(seed)
    keep = []
    for c in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == c)
        keep.append(idx[np.sort(rng.child(c).permutation(len(idx))[:per_class])])
    return ds.take(np.sort(np.concatenate(keep)) if keep else np.zeros(0, np.int64))


# ---------------------------------------------------------------------------
# synthetic clusters


@dataclass
class SyntheticSpec:
    clusters: list = field(default_factory=lambda: [[0.8, 0.3, 0.2], [0.2, 0.3, 0.8]])
    noise_std: float = 0.1
    samples_per_class: int = 64
    seed: int = 0
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if len(self.clusters) < 2:
            raise ValueError("synthetic data needs at least 2 classes")
        if len({len(c) for c in self.clusters}) != 1:
            raise ValueError("every cluster mean must have the same channel count")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        names = set(cls.__dataclass_fields__)
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown synthetic fields: {sorted(unknown)}")
        return cls(**d)


def make_synthetic(spec: SyntheticSpec, split="train") -> Dataset:
    """Class c images are its channel-mean vector plus Gaussian noise, clipped to [0, 1]."""
    means = np.asarray(spec.clusters, dtype=np.float64)
    k, C = means.shape
    rng = Rng(spec.seed)
    n = spec.samples_per_class
    shape = (n, spec.height, spec.width, C)
    xs, ys = [], []
    for c in range(k):
        noise = rng.child(c).normal(shape, spec.noise_std, np.float64) if spec.noise_std > 0 else np.zeros(shape)
        xs.append(np.clip(means[c] + noise, 0.0, 1.0))
        ys.append(np.full(n, c))
    order = rng.child(k).permutation(n * k)
    images = np.concatenate(xs).astype(np.float32)[order]
    labels = np.concatenate(ys)[order]
    return Dataset(images, labels, [f"cluster{c}" for c in range(k)], split)
