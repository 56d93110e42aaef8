"""Frozen-representation evaluation: linear probe, kNN and a similarity-ordering diagnostic."""

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .data import two_views
from .errors import ConfigError, SamplingError
from .numerics import Rng
from .objectives import softmax_ce


@dataclass
class ProbeResult:
    accuracy: float
    per_class_accuracy: np.ndarray
    epochs_used: int

    def to_dict(self):
        return {
            "accuracy": self.accuracy,
            "per_class_accuracy": [None if np.isnan(a) else float(a) for a in self.per_class_accuracy],
            "epochs_used": self.epochs_used,
        }


@dataclass
class SimilarityDiagnostic:
    mean_same_instance: float
    mean_same_class: float
    mean_cross_class: float

    def to_dict(self):
        return {
            "mean_same_instance": self.mean_same_instance,
            "mean_same_class": self.mean_same_class,
            "mean_cross_class": self.mean_cross_class,
        }

    def ordered(self, margin=0.0):
        return (
            self.mean_same_instance - self.mean_same_class >= margin
            and self.mean_same_class - self.mean_cross_class >= margin
        )


def _encode(encoder, x):
    feats = np.asarray(encoder(np.asarray(x, dtype=np.float64)), dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] != len(x):
        raise ConfigError(f"encoder returned shape {feats.shape} for {len(x)} inputs")
    return feats


def linear_probe(encoder, train, test, epochs=100, lr=0.1, batch_size=64, seed=0):
    """Train one softmax-CE linear layer on frozen features; report test accuracy.

    Weights start at zero, so the result does not depend on the order of
    feature dimensions.
    """
    if train.num_classes != test.num_classes:
        raise ConfigError(f"train has {train.num_classes} classes, test has {test.num_classes}")
    if len(train) == 0 or len(test) == 0:
        raise ConfigError("linear probe needs non-empty train and test sets")
    f_train = _encode(encoder, train.features)
    f_test = _encode(encoder, test.features)
    c = train.num_classes
    w = np.zeros((f_train.shape[1], c))
    b = np.zeros(c)
    rng = Rng(seed)
    n = len(train)
    for _ in range(epochs):
        perm = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            x = f_train[idx]
            _, g = softmax_ce(x @ w + b, train.class_ids[idx])
            # softmax_ce already averages over the batch
            w -= lr * (x.T @ g)
            b -= lr * g.sum(axis=0)
    pred = np.argmax(f_test @ w + b, axis=1)
    correct = pred == test.class_ids
    per_class = np.full(c, np.nan)
    for k in range(c):
        rows = test.class_ids == k
        if rows.any():
            per_class[k] = float(correct[rows].mean())
    return ProbeResult(float(correct.mean()), per_class, epochs)


def _unit_rows(f):
    norms = np.sqrt(np.sum(f * f, axis=1, keepdims=True))
    return f / np.where(norms > 0, norms, 1.0)


def knn_eval(encoder, train, test, k=5):
    """Cosine-similarity k-nearest-neighbour accuracy on frozen features."""
    if len(train) == 0 or len(test) == 0:
        raise ConfigError("kNN needs non-empty train and test sets")
    if not 1 <= k <= len(train):
        raise ConfigError(f"k={k} must lie in [1, {len(train)}]")
    f_train = _unit_rows(_encode(encoder, train.features))
    f_test = _unit_rows(_encode(encoder, test.features))
    sims = f_test @ f_train.T
    num_classes = max(train.num_classes, test.num_classes)
    pred = _kernels.knn_vote(sims, train.class_ids, k, num_classes)
    return float(np.mean(pred == test.class_ids))


def _cosine(a, b):
    # d / sqrt(d * d) is exactly 1 for identical rows
    dots = np.sum(a * b, axis=1)
    denom = np.sqrt(np.sum(a * a, axis=1) * np.sum(b * b, axis=1))
    cos = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
    return np.clip(cos, -1.0, 1.0)


def similarity_ordering(encoder, dataset, augment_cfg, rng, samples=2000):
    """Mean cosine similarity of encoded pairs at three relation levels.

    * same instance: two augmented views of one sample;
    * same class: one view each of two distinct samples of one class;
    * cross class: one view each of two samples from different classes.
    """
    if samples < 1:
        raise SamplingError("need at least one sample per pair type")
    counts = np.bincount(dataset.class_ids, minlength=dataset.num_classes)
    present = np.flatnonzero(counts)
    if np.any(counts[present] < 2):
        c = int(present[counts[present] < 2][0])
        raise SamplingError(f"class {c} has fewer than 2 samples")
    order = np.argsort(dataset.class_ids, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)])
    x = dataset.features

    def pick_in(classes, exclude_pos=None):
        n_c = counts[classes]
        if exclude_pos is None:
            pos = np.floor(rng.uniform(len(classes)) * n_c).astype(np.int64)
        else:
            pos = (exclude_pos + 1 + np.floor(rng.uniform(len(classes)) * (n_c - 1)).astype(np.int64)) % n_c
        return pos, order[starts[classes] + pos]

    # same instance
    rows = present[rng.integers(len(present), samples)]
    _, a = pick_in(rows)
    v1, v2 = two_views(x[a], augment_cfg, rng)
    same_inst = _cosine(_encode(encoder, v1), _encode(encoder, v2))

    # same class, different instance
    cls = present[rng.integers(len(present), samples)]
    pos_a, a = pick_in(cls)
    _, b = pick_in(cls, exclude_pos=pos_a)
    va = two_views(x[a], augment_cfg, rng)[0]
    vb = two_views(x[b], augment_cfg, rng)[0]
    same_cls = _cosine(_encode(encoder, va), _encode(encoder, vb))

    # cross class
    if len(present) < 2:
        cross = np.array([np.nan])
    else:
        ia = rng.integers(len(present), samples)
        shift = 1 + np.floor(rng.uniform(samples) * (len(present) - 1)).astype(np.int64)
        ib = (ia + shift) % len(present)
        _, a = pick_in(present[ia])
        _, b = pick_in(present[ib])
        va = two_views(x[a], augment_cfg, rng)[0]
        vb = two_views(x[b], augment_cfg, rng)[0]
        cross = _cosine(_encode(encoder, va), _encode(encoder, vb))
    return SimilarityDiagnostic(float(same_inst.mean()), float(same_cls.mean()), float(cross.mean()))
