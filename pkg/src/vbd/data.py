"""Labeled image sets: CIFAR-10 reader, synthetic generator, stratified split, container files."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field

import numpy as np

DATASET_MAGIC = b"VBDS"
DATASET_VERSION = 1

CIFAR_RECORD = 1 + 3072
CIFAR_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR_TEST_FILE = "test_batch.bin"


def derive_seed(master: int, *keys: int) -> int:
    """A 32-bit seed derived from a master seed and integer keys."""
    return int(np.random.SeedSequence([int(master), *map(int, keys)]).generate_state(1)[0])


@dataclass
class LabeledImageSet:
    """Images (N, H, W, C) in [0, 1], integer labels, and stable per-item ids."""

    images: np.ndarray
    labels: np.ndarray
    class_count: int
    ids: np.ndarray = field(default=None)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim == 3:
            self.images = self.images[..., None]
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.ids)):
            raise ValueError("images, labels and ids must have equal lengths")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in [0, {self.class_count})")
        if len(np.unique(self.ids)) != len(self.ids):
            raise ValueError("ids must be unique")

    def __len__(self):
        return len(self.labels)

    @property
    def dims(self):
        return tuple(self.images.shape[1:])

    def subset(self, index):
        index = np.asarray(index)
        return LabeledImageSet(self.images[index], self.labels[index], self.class_count, self.ids[index])

    def of_class(self, k):
        return self.subset(np.flatnonzero(self.labels == k))

    def without_ids(self, ids):
        return self.subset(np.flatnonzero(~np.isin(self.ids, np.asarray(list(ids), dtype=np.int64))))

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.class_count)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SyntheticSpec:
    class_count: int = 10
    per_class: int = 500
    dims: tuple[int, int, int] = (32, 32, 3)
    prototype_contrast: float = 0.05
    noise_std: float = 0.1
    seed: int = 0
    max_frequency: int = 2

    def validate(self):
        if self.class_count < 1 or self.per_class < 1:
            raise ValueError("class_count and per_class must be positive")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if not 0 <= self.prototype_contrast <= 0.5:
            raise ValueError("prototype_contrast must lie in [0, 0.5]")
        return self


def class_prototypes(spec: SyntheticSpec):
    """One smooth image per class: a random mix of low-frequency cosines around 0.5."""
    H, W, C = spec.dims
    rng = np.random.default_rng([spec.seed, 0])
    yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    freqs = [(u, v) for u in range(spec.max_frequency + 1) for v in range(spec.max_frequency + 1) if u or v]
    protos = np.empty((spec.class_count, H, W, C))
    for k in range(spec.class_count):
        for c in range(C):
            pat = np.zeros((H, W))
            for u, v in freqs:
                amp = rng.normal()
                phase = rng.uniform(0, 2 * np.pi)
                pat += amp * np.cos(2 * np.pi * (u * yy + v * xx) + phase)
            pat /= np.abs(pat).max()
            protos[k, :, :, c] = 0.5 + spec.prototype_contrast * pat
    return protos


def generate_synthetic(spec: SyntheticSpec, sample: int = 0) -> LabeledImageSet:
    """``per_class`` noisy copies of each class prototype, clamped to [0, 1].

    ``sample`` selects an independent noise draw over the same prototypes
    (0 for the training set, other values for test sets).
    """
    spec.validate()
    protos = class_prototypes(spec)
    rng = np.random.default_rng([spec.seed, 1, sample])
    n = spec.class_count * spec.per_class
    labels = np.repeat(np.arange(spec.class_count), spec.per_class)
    noise = rng.normal(0.0, spec.noise_std, (n, *spec.dims)) if spec.noise_std > 0 else 0.0
    images = np.clip(protos[labels] + noise, 0.0, 1.0)
    return LabeledImageSet(images.astype(np.float32), labels, spec.class_count)


# ---------------------------------------------------------------------------
# CIFAR-10


class DatasetFormatError(ValueError):
    pass


def read_cifar10_batch(path, expect_records: int | None = None):
    """Parse one CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes (R, G, B planes)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    n, rest = divmod(len(raw), CIFAR_RECORD)
    if rest:
        raise DatasetFormatError(
            f"{path}: truncated record at byte offset {n * CIFAR_RECORD} ({rest} of {CIFAR_RECORD} bytes)"
        )
    if expect_records is not None and n != expect_records:
        raise DatasetFormatError(
            f"{path}: file ends at byte offset {len(raw)} after {n} records, expected {expect_records}"
        )
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        raise DatasetFormatError(f"{path}: label byte {labels[bad[0]]} > 9 at byte offset {bad[0] * CIFAR_RECORD}")
    images = rec[:, 1:].reshape(n, 3, 32, 32).transpose(0, 2, 3, 1).astype(np.float32) / 255.0
    return images, labels


def load_cifar10(dir_path, files=CIFAR_TRAIN_FILES, records_per_file: int | None = 10000) -> LabeledImageSet:
    images, labels = [], []
    for name in files:
        path = os.path.join(dir_path, name)
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing CIFAR-10 batch file {path}")
        x, y = read_cifar10_batch(path, records_per_file)
        images.append(x)
        labels.append(y)
    return LabeledImageSet(np.concatenate(images), np.concatenate(labels), 10)


def load_cifar10_test(dir_path) -> LabeledImageSet:
    return load_cifar10(dir_path, (CIFAR_TEST_FILE,))


# ---------------------------------------------------------------------------
# splitting


def split(data: LabeledImageSet, train_fraction: float, seed: int = 0):
    """Stratified, seeded split into (train, holdout); per class round(fraction * n_k) go to train."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    rng = np.random.default_rng(seed)
    train_idx = []
    for k in range(data.class_count):
        idx = np.flatnonzero(data.labels == k)
        if idx.size == 0:
            continue
        idx = idx[rng.permutation(idx.size)]
        n_train = int(np.floor(train_fraction * idx.size + 0.5))
        train_idx.append(idx[:n_train])
    train_mask = np.zeros(len(data), dtype=bool)
    if train_idx:
        train_mask[np.concatenate(train_idx)] = True
    return data.subset(np.flatnonzero(train_mask)), data.subset(np.flatnonzero(~train_mask))


# ---------------------------------------------------------------------------
# container files


def _record_dtype(dims):
    return np.dtype([("id", "<u4"), ("label", "<u2"), ("pixels", "u1", (int(np.prod(dims)),))])


def save_dataset(path, data: LabeledImageSet):
    """Write the raw container; pixels are quantized to bytes."""
    H, W, C = data.dims
    rec = np.zeros(len(data), dtype=_record_dtype(data.dims))
    rec["id"] = data.ids
    rec["label"] = data.labels
    rec["pixels"] = np.clip(np.rint(data.images.reshape(len(data), -1) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<HIHHHH", DATASET_VERSION, len(data), H, W, C, data.class_count))
        fh.write(rec.tobytes())


def load_dataset(path) -> LabeledImageSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != DATASET_MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset container")
    head = "<HIHHHH"
    version, count, H, W, C, class_count = struct.unpack_from(head, raw, 4)
    if version != DATASET_VERSION:
        raise DatasetFormatError(f"{path}: unsupported container version {version}")
    off = 4 + struct.calcsize(head)
    dt = _record_dtype((H, W, C))
    if len(raw) - off != count * dt.itemsize:
        raise DatasetFormatError(
            f"{path}: expected {count} records of {dt.itemsize} bytes after offset {off}, found {len(raw) - off} bytes"
        )
    rec = np.frombuffer(raw, dtype=dt, count=count, offset=off)
    images = rec["pixels"].reshape(count, H, W, C).astype(np.float32) / 255.0
    return LabeledImageSet(images, rec["label"].astype(np.int64), class_count, rec["id"].astype(np.int64))
