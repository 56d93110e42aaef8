"""Synthetic datasets, feature-space augmentation and CSV ingestion.

CSV layout: header ``f0,...,f{D-1},instance_id,class_id`` followed by one
row per sample, decimal features, UTF-8, ``\\n`` line endings.
"""

import csv
import io
from dataclasses import dataclass

import numpy as np

from .errors import ConsistencyError, DataFormatError
from .labels import LabelPair, validate_dataset


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray
    instance_ids: np.ndarray
    class_ids: np.ndarray
    num_classes: int

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        inst = np.asarray(self.instance_ids, dtype=np.int64)
        cls = np.asarray(self.class_ids, dtype=np.int64)
        if feats.ndim != 2 or inst.shape != (feats.shape[0],) or cls.shape != inst.shape:
            raise ValueError(f"features {feats.shape}, instance ids {inst.shape}, class ids {cls.shape} disagree")
        if np.any(cls < 0) or np.any(cls >= self.num_classes) or np.any(inst < 0):
            raise ValueError(f"labels outside [0, {self.num_classes})")
        violation = validate_dataset(zip(inst.tolist(), cls.tolist()))
        if violation is not None:
            raise ConsistencyError(
                f"instance {violation.instance_id} at rows {violation.indices} has classes {violation.class_ids}"
            )
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "instance_ids", inst)
        object.__setattr__(self, "class_ids", cls)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]

    @property
    def labels(self):
        return [LabelPair(int(i), int(c)) for i, c in zip(self.instance_ids, self.class_ids)]

    def subset(self, index):
        index = np.asarray(index)
        return Dataset(self.features[index], self.instance_ids[index], self.class_ids[index], self.num_classes)

    def with_features(self, features):
        return Dataset(features, self.instance_ids, self.class_ids, self.num_classes)

    def with_num_classes(self, num_classes):
        return Dataset(self.features, self.instance_ids, self.class_ids, num_classes)


@dataclass(frozen=True)
class AugmentConfig:
    noise_sigma: float = 0.0
    scale_range: tuple = (1.0, 1.0)
    mask_prob: float = 0.0

    def __post_init__(self):
        lo, hi = self.scale_range
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if not 0 < lo <= hi:
            raise ValueError("scale range must satisfy 0 < lo <= hi")
        if not 0 <= self.mask_prob < 1:
            raise ValueError("mask_prob must lie in [0, 1)")


def make_blobs(num_classes, per_class, dim, spread, rng):
    """Gaussian blobs around unit-norm class centres; rows are grouped by class, instance id = row."""
    if min(num_classes, per_class, dim) < 1:
        raise ValueError("counts must be at least 1")
    if spread < 0:
        raise ValueError("spread must be nonnegative")
    centers = rng.normal((num_classes, dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    cls = np.repeat(np.arange(num_classes), per_class)
    noise = rng.normal((num_classes * per_class, dim))
    feats = centers[cls] + spread * noise
    return Dataset(feats, np.arange(len(cls)), cls, num_classes)


def augment(x, cfg, rng):
    """One augmented view per row of ``x``: mask * (scale * x + noise)."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n, d = x.shape
    lo, hi = cfg.scale_range
    scale = rng.uniform((n, 1), lo, hi)
    noise = rng.normal((n, d)) * cfg.noise_sigma
    keep = rng.uniform((n, d)) >= cfg.mask_prob
    return np.where(keep, scale * x + noise, 0.0)


def two_views(x, cfg, rng):
    """Two independent augmentations of the same sample (or batch of samples)."""
    single = np.asarray(x).ndim == 1
    v1 = augment(x, cfg, rng)
    v2 = augment(x, cfg, rng)
    if single:
        return v1[0], v2[0]
    return v1, v2


def split(dataset, test_fraction, rng):
    """Per-class random split; every class keeps at least one training row."""
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must lie in [0, 1)")
    train_idx, test_idx = [], []
    for c in range(dataset.num_classes):
        rows = np.flatnonzero(dataset.class_ids == c)
        rows = rows[rng.permutation(len(rows))]
        n_test = min(int(round(test_fraction * len(rows))), max(len(rows) - 1, 0))
        test_idx.append(rows[:n_test])
        train_idx.append(rows[n_test:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    return dataset.subset(train_idx), dataset.subset(test_idx)


def save_csv(dataset, path):
    header = [f"f{i}" for i in range(dataset.dim)] + ["instance_id", "class_id"]
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row, inst, cls in zip(dataset.features, dataset.instance_ids, dataset.class_ids):
        buf.write(",".join(format(v, ".17g") for v in row) + f",{inst},{cls}\n")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(buf.getvalue())


def load_csv(path, num_classes=None):
    """Parse a dataset file; errors name the offending line (1-based, header is line 1)."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataFormatError("empty file", line=1) from None
        d = len(header) - 2
        expected = [f"f{i}" for i in range(d)] + ["instance_id", "class_id"]
        if d < 1 or [h.strip() for h in header] != expected:
            raise DataFormatError("header must be f0,...,f{D-1},instance_id,class_id", line=1)
        feats, inst, cls = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != d + 2:
                raise DataFormatError(f"expected {d + 2} columns, found {len(row)}", line=lineno)
            try:
                feats.append([float(v) for v in row[:d]])
            except ValueError as exc:
                raise DataFormatError(f"non-numeric feature ({exc})", line=lineno) from None
            try:
                i, c = int(row[d]), int(row[d + 1])
            except ValueError:
                raise DataFormatError("instance_id and class_id must be integers", line=lineno) from None
            if i < 0 or c < 0:
                raise DataFormatError("label ids must be nonnegative", line=lineno)
            inst.append(i)
            cls.append(c)
    if not feats:
        raise DataFormatError("no data rows", line=2)
    violation = validate_dataset(zip(inst, cls))
    if violation is not None:
        a, b = violation.indices
        raise ConsistencyError(
            f"line {b + 2}: instance {violation.instance_id} has class {violation.class_ids[1]} "
            f"but class {violation.class_ids[0]} on line {a + 2}"
        )
    k = max(cls) + 1 if num_classes is None else num_classes
    return Dataset(np.array(feats), np.array(inst), np.array(cls), k)
