"""CIFAR-10 ingestion, splitting, symmetric label noise and quarter-turn rotations."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np

from .nn_core import N_CLASSES

RECORD_BYTES = 3073
IMAGE_SHAPE = (32, 32, 3)
TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
TEST_FILE = "test_batch.bin"


class IngestionError(OSError):
    def __init__(self, path, offset: int, message: str):
        super().__init__(f"{path} (byte offset {offset}): {message}")
        self.path = Path(path)
        self.offset = offset


@dataclass(frozen=True)
class SampleRecord:
    id: int
    image: np.ndarray
    true_label: int
    observed_label: int

    @property
    def is_noisy(self) -> bool:
        return self.true_label != self.observed_label


class SampleSet:
    """Column-oriented collection of SampleRecords.

    ``true_labels`` exist for evaluation only; training and detection read
    ``observed_labels``.
    """

    def __init__(self, ids, images, true_labels, observed_labels=None):
        self.ids = np.asarray(ids, dtype=np.int64)
        self.images = np.asarray(images, dtype=np.uint8)
        self.true_labels = np.asarray(true_labels, dtype=np.int64)
        if observed_labels is None:
            observed_labels = self.true_labels
        self.observed_labels = np.array(observed_labels, dtype=np.int64)
        n = len(self.ids)
        if not (len(self.images) == len(self.true_labels) == len(self.observed_labels) == n):
            raise ValueError("column lengths differ")

    def __len__(self) -> int:
        return len(self.ids)

    def __getitem__(self, i: int) -> SampleRecord:
        return SampleRecord(int(self.ids[i]), self.images[i], int(self.true_labels[i]),
                            int(self.observed_labels[i]))

    def __iter__(self) -> Iterator[SampleRecord]:
        return (self[i] for i in range(len(self)))

    @property
    def is_noisy(self) -> np.ndarray:
        return self.true_labels != self.observed_labels

    def take(self, index) -> "SampleSet":
        index = np.asarray(index, dtype=np.intp)
        return SampleSet(self.ids[index], self.images[index], self.true_labels[index],
                         self.observed_labels[index])

    def with_observed(self, observed_labels) -> "SampleSet":
        return SampleSet(self.ids, self.images, self.true_labels, observed_labels)

    @classmethod
    def concatenate(cls, parts) -> "SampleSet":
        parts = list(parts)
        return cls(
            np.concatenate([p.ids for p in parts]),
            np.concatenate([p.images for p in parts]),
            np.concatenate([p.true_labels for p in parts]),
            np.concatenate([p.observed_labels for p in parts]),
        )


# ---------------------------------------------------------------------------
# CIFAR-10 binary format: 1 label byte + 1024 R + 1024 G + 1024 B (row-major)


def read_cifar_batch(path, id_offset: int = 0) -> SampleSet:
    path = Path(path)
    if not path.is_file():
        raise IngestionError(path, 0, "file not found")
    raw = path.read_bytes()
    if len(raw) == 0:
        raise IngestionError(path, 0, "empty file")
    n, rest = divmod(len(raw), RECORD_BYTES)
    if rest:
        raise IngestionError(path, n * RECORD_BYTES,
                             f"truncated record ({rest} of {RECORD_BYTES} bytes)")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(n, RECORD_BYTES)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= N_CLASSES)
    if bad.size:
        raise IngestionError(path, int(bad[0]) * RECORD_BYTES, f"label {labels[bad[0]]} out of range")
    images = rec[:, 1:].reshape(n, 3, 32, 32).transpose(0, 2, 3, 1)
    return SampleSet(np.arange(id_offset, id_offset + n), np.ascontiguousarray(images), labels)


def write_cifar_batch(path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    if images.shape[1:] != IMAGE_SHAPE:
        raise ValueError(f"expected images of shape (N, 32, 32, 3), got {images.shape}")
    rec = np.empty((len(images), RECORD_BYTES), dtype=np.uint8)
    rec[:, 0] = np.asarray(labels, dtype=np.uint8)
    rec[:, 1:] = images.transpose(0, 3, 1, 2).reshape(len(images), -1)
    Path(path).write_bytes(rec.tobytes())


def load_cifar10(directory) -> tuple[SampleSet, SampleSet]:
    """Read the five training batches (the train pool) and the test batch.

    Test ids continue after the last train-pool id so ids stay globally unique.
    """
    directory = Path(directory)
    parts, offset = [], 0
    for name in TRAIN_FILES:
        part = read_cifar_batch(directory / name, offset)
        parts.append(part)
        offset += len(part)
    pool = SampleSet.concatenate(parts)
    test = read_cifar_batch(directory / TEST_FILE, offset)
    return pool, test


# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    train_count: int = 45000
    val_count: int = 5000
    seed: int = 0
    stratified: bool = False


def split(pool: SampleSet, spec: SplitSpec) -> tuple[SampleSet, SampleSet]:
    if spec.train_count < 0 or spec.val_count < 0:
        raise ValueError("split counts must be non-negative")
    if spec.train_count + spec.val_count > len(pool):
        raise ValueError(f"split {spec.train_count}+{spec.val_count} exceeds pool of {len(pool)}")
    rng = np.random.default_rng(spec.seed)
    if not spec.stratified:
        order = rng.permutation(len(pool))
        train_idx = order[:spec.train_count]
        val_idx = order[spec.train_count:spec.train_count + spec.val_count]
    else:
        train_idx, val_idx = _stratified_indices(pool.true_labels, spec, rng)
    return pool.take(np.sort(train_idx)), pool.take(np.sort(val_idx))


def _stratified_indices(labels, spec: SplitSpec, rng):
    n = len(labels)
    classes = np.unique(labels)
    per_class = {c: rng.permutation(np.flatnonzero(labels == c)) for c in classes}
    # largest-remainder apportionment of each split across classes
    def apportion(count):
        share = {c: count * len(per_class[c]) / n for c in classes}
        base = {c: int(np.floor(s)) for c, s in share.items()}
        left = count - sum(base.values())
        for c in sorted(classes, key=lambda c: (base[c] - share[c], c))[:left]:
            base[c] += 1
        return base

    t_counts = apportion(spec.train_count)
    v_counts = apportion(spec.val_count)
    train_idx, val_idx = [], []
    for c in classes:
        idx = per_class[c]
        t = t_counts[c]
        v = min(v_counts[c], len(idx) - t)
        train_idx.append(idx[:t])
        val_idx.append(idx[t:t + v])
    return np.concatenate(train_idx), np.concatenate(val_idx)


def noise_count(rate: float, n: int) -> int:
    """round(rate * n), halves rounded up."""
    return int(np.floor(rate * n + 0.5))


def inject_noise(train: SampleSet, rate: float, seed: int, exclude_true: bool = False) -> SampleSet:
    """Relabel round(rate*N) uniformly chosen samples with uniform labels in 0..9.

    With ``exclude_true`` the new label is drawn from the nine other classes,
    otherwise a draw may reproduce the true label.
    """
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"noise rate must lie in [0, 1], got {rate}")
    rng = np.random.default_rng(seed)
    n = len(train)
    chosen = np.sort(rng.choice(n, size=noise_count(rate, n), replace=False))
    observed = train.true_labels.copy()
    if exclude_true:
        shift = rng.integers(1, N_CLASSES, size=len(chosen))
        observed[chosen] = (train.true_labels[chosen] + shift) % N_CLASSES
    else:
        observed[chosen] = rng.integers(0, N_CLASSES, size=len(chosen))
    return train.with_observed(observed)


def balanced_subset(samples: SampleSet, n: int) -> SampleSet:
    """First n samples in set order, balanced over observed labels.

    Balancing uses observed labels so that true labels never influence which
    samples a training run sees.
    """
    if n >= len(samples):
        return samples
    quota = np.full(N_CLASSES, n // N_CLASSES)
    quota[: n % N_CLASSES] += 1
    taken = np.zeros(N_CLASSES, dtype=int)
    keep = []
    for i, y in enumerate(samples.observed_labels):
        if taken[y] < quota[y]:
            taken[y] += 1
            keep.append(i)
            if len(keep) == n:
                break
    if len(keep) < n:  # a class ran short; fill in order
        rest = np.setdiff1d(np.arange(len(samples)), keep)[: n - len(keep)]
        keep = np.sort(np.concatenate([keep, rest]))
    return samples.take(keep)


def write_noise_manifest(path, samples: SampleSet) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "true_label", "observed_label", "is_noisy"])
        for i, t, o in zip(samples.ids, samples.true_labels, samples.observed_labels):
            w.writerow([int(i), int(t), int(o), int(t != o)])


def read_noise_manifest(path) -> dict[str, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.int64, ndmin=2)
    return {"id": data[:, 0], "true_label": data[:, 1], "observed_label": data[:, 2],
            "is_noisy": data[:, 3].astype(bool)}


def channel_stats(images: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = images.reshape(-1, images.shape[-1]).astype(np.float64) / 255.0
    return x.mean(axis=0), x.std(axis=0)


def normalize(images: np.ndarray, mean, std, dtype=np.float32) -> np.ndarray:
    x = images.astype(dtype) / dtype(255.0)
    return (x - np.asarray(mean, dtype=dtype)) / np.asarray(std, dtype=dtype)


# ---------------------------------------------------------------------------
# rotations: label k is k counter-clockwise quarter turns


@dataclass(frozen=True)
class RotatedSample:
    image: np.ndarray
    rotation_label: int
    source_id: int


class RotatedBatch(NamedTuple):
    images: np.ndarray
    rotation_labels: np.ndarray
    source_ids: np.ndarray


def _check_square(images: np.ndarray, axes=(1, 2)) -> None:
    if images.shape[axes[0]] != images.shape[axes[1]]:
        raise ValueError(f"quarter-turn rotation needs square images, got {images.shape}")


def rotate(images: np.ndarray, k: int, axes=(1, 2)) -> np.ndarray:
    return np.rot90(images, k, axes=axes)


def rotate_by_labels(images: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Rotate each image of a (B, H, W, C) batch by its own quarter-turn count."""
    _check_square(images)
    out = np.empty_like(images)
    for k in range(4):
        sel = labels == k
        if sel.any():
            out[sel] = np.rot90(images[sel], k, axes=(1, 2))
    return out


def rotate_batch(images: np.ndarray, rng: np.random.Generator, source_ids=None) -> RotatedBatch:
    _check_square(images)
    labels = rng.integers(0, 4, size=len(images))
    if source_ids is None:
        source_ids = np.arange(len(images))
    return RotatedBatch(rotate_by_labels(images, labels), labels, np.asarray(source_ids))


def rotate_all_four(image: np.ndarray, source_id: int = -1) -> list[RotatedSample]:
    _check_square(image, axes=(0, 1))
    return [RotatedSample(np.rot90(image, k, axes=(0, 1)), k, source_id) for k in range(4)]
