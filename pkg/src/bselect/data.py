"""Datasets: synthesis, file IO, label-noise injection, long-tailed subsampling,
and the shuffled batch stream that feeds the training loop.

Datasets are immutable after construction; every transformation returns a new
LabeledDataset. Noise flags are derived (label != clean label), so they can
never fall out of sync with the labels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .errors import (
    InsufficientClassCount,
    InvalidDimensions,
    InvalidRate,
    LabelOutOfRange,
    ParseError,
)

BINARY_MAGIC = b"BSEL1"


@dataclass(frozen=True)
class LabeledDataset:
    features: np.ndarray  # (n, input_dim) float64
    labels: np.ndarray  # (n,) training targets, possibly noisy
    clean_labels: np.ndarray  # (n,) ground-truth targets
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        n = self.features.shape[0]
        if self.labels.shape != (n,) or self.clean_labels.shape != (n,):
            raise InvalidDimensions("labels must align with feature rows")
        for arr in (self.labels, self.clean_labels):
            if arr.size and (arr.min() < 0 or arr.max() >= self.num_classes):
                raise LabelOutOfRange(
                    f"labels must lie in [0, {self.num_classes}), got range "
                    f"[{arr.min()}, {arr.max()}]"
                )

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    @property
    def noise_flags(self) -> np.ndarray:
        return self.labels != self.clean_labels

    def take(self, idx, split=None) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(
            features=self.features[idx],
            labels=self.labels[idx],
            clean_labels=self.clean_labels[idx],
            num_classes=self.num_classes,
            split=split or self.split,
        )


def gen_synthetic_clusters(means, per_class, seed, test_per_class=None):
    """Isotropic unit-variance Gaussian clusters at explicit mean vectors.

    `means` is a (num_classes, input_dim) array; returns (train, test) splits
    like gen_synthetic. Lets experiments mix easy and hard class geometries.
    """
    means = np.asarray(means, dtype=float)
    num_classes, input_dim = means.shape
    if num_classes < 2 or per_class < 1:
        raise InvalidDimensions(
            f"need num_classes >= 2 and per_class >= 1, got {num_classes}, {per_class}"
        )
    if test_per_class is None:
        test_per_class = max(per_class // 5, 1)
    rng = np.random.default_rng(seed)

    def draw(count_per_class, split):
        labels = rng.permutation(np.repeat(np.arange(num_classes), count_per_class))
        x = means[labels] + rng.standard_normal((labels.size, input_dim))
        return LabeledDataset(
            features=x,
            labels=labels,
            clean_labels=labels.copy(),
            num_classes=num_classes,
            split=split,
        )

    return draw(per_class, "train"), draw(test_per_class, "test")


def gen_synthetic(num_classes, per_class, input_dim, separation, seed, test_per_class=None):
    """k isotropic unit-variance Gaussian clusters with pairwise mean distance `separation`.

    Means sit on a scaled one-hot simplex, which needs input_dim >= num_classes.
    Returns (train, test) splits drawn from the same distribution; the test
    split has test_per_class examples per class (default per_class // 5, at
    least 1). Deterministic per seed.
    """
    if num_classes < 2 or per_class < 1 or input_dim < 1:
        raise InvalidDimensions(
            f"need num_classes >= 2, per_class >= 1, input_dim >= 1; "
            f"got {num_classes}, {per_class}, {input_dim}"
        )
    if input_dim < num_classes:
        raise InvalidDimensions(
            f"simplex means need input_dim >= num_classes ({input_dim} < {num_classes})"
        )
    if separation < 0:
        raise InvalidRate(f"separation must be nonnegative, got {separation}")
    means = np.zeros((num_classes, input_dim))
    means[np.arange(num_classes), np.arange(num_classes)] = separation / np.sqrt(2.0)
    return gen_synthetic_clusters(means, per_class, seed, test_per_class)


def load_csv(path) -> LabeledDataset:
    """Rows `label, feat_0, ...`; an optional non-numeric header row is skipped."""
    rows = []
    n_cols = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            fields = [f.strip() for f in line.split(",")]
            try:
                values = [float(f) for f in fields]
            except ValueError:
                if lineno == 1:
                    continue  # header
                raise ParseError(f"{path}:{lineno}: unparseable row")
            if len(values) < 2:
                raise ParseError(f"{path}:{lineno}: need a label and at least one feature")
            if n_cols is None:
                n_cols = len(values)
            elif len(values) != n_cols:
                raise ParseError(
                    f"{path}:{lineno}: expected {n_cols} columns, got {len(values)}"
                )
            if values[0] < 0 or values[0] != int(values[0]):
                raise LabelOutOfRange(f"{path}:{lineno}: label must be a nonnegative integer")
            rows.append(values)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    arr = np.asarray(rows, dtype=float)
    labels = arr[:, 0].astype(int)
    return LabeledDataset(
        features=arr[:, 1:],
        labels=labels,
        clean_labels=labels.copy(),
        num_classes=int(labels.max()) + 1,
        split="train",
    )


def save_csv(ds: LabeledDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("label," + ",".join(f"feat_{j}" for j in range(ds.input_dim)) + "\n")
        for y, row in zip(ds.labels, ds.features):
            fh.write(f"{int(y)}," + ",".join(repr(float(v)) for v in row) + "\n")


def save_binary(ds: LabeledDataset, path) -> None:
    """Compact binary form: magic, split byte, little-endian dims, labels, features."""
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(b"\x01" if ds.split == "test" else b"\x00")
        fh.write(struct.pack("<III", ds.n, ds.input_dim, ds.num_classes))
        fh.write(ds.labels.astype("<i4").tobytes())
        fh.write(ds.clean_labels.astype("<i4").tobytes())
        fh.write(np.ascontiguousarray(ds.features, dtype="<f8").tobytes())


def load_binary(path) -> LabeledDataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:5] != BINARY_MAGIC:
        raise ParseError(f"{path}: bad magic bytes, not a dataset file")
    split = "test" if blob[5] == 1 else "train"
    n, dim, k = struct.unpack("<III", blob[6:18])
    offset = 18
    labels = np.frombuffer(blob, dtype="<i4", count=n, offset=offset).astype(int)
    offset += 4 * n
    clean = np.frombuffer(blob, dtype="<i4", count=n, offset=offset).astype(int)
    offset += 4 * n
    feats = np.frombuffer(blob, dtype="<f8", count=n * dim, offset=offset).reshape(n, dim)
    if offset + 8 * n * dim != len(blob):
        raise ParseError(f"{path}: truncated or oversized payload")
    return LabeledDataset(
        features=feats.copy(),
        labels=labels,
        clean_labels=clean,
        num_classes=k,
        split=split,
    )


def inject_symmetric_noise(ds: LabeledDataset, rate: float, seed) -> LabeledDataset:
    """Flip exactly floor(rate * n) labels, each to a uniformly drawn other class."""
    if not 0 <= rate < 1:
        raise InvalidRate(f"noise rate must lie in [0, 1), got {rate}")
    n_flip = int(np.floor(rate * ds.n))
    labels = ds.labels.copy()
    if n_flip:
        rng = np.random.default_rng(seed)
        idx = rng.choice(ds.n, size=n_flip, replace=False)
        draws = rng.integers(0, ds.num_classes - 1, size=n_flip)
        flipped = draws + (draws >= ds.clean_labels[idx])
        labels[idx] = flipped
    return replace(ds, labels=labels)


def make_imbalanced(ds: LabeledDataset, imbalance_ratio: float) -> LabeledDataset:
    """Long-tailed subsample: class c keeps floor(n_max * ratio^(-c/(k-1))) examples.

    Counts decay exponentially with class index (class 0 is the head), so the
    max/min count equals the ratio up to flooring. Keeps each class's first
    examples under the dataset's stored order.
    """
    if imbalance_ratio < 1:
        raise InvalidRate(f"imbalance ratio must be >= 1, got {imbalance_ratio}")
    k = ds.num_classes
    counts = np.bincount(ds.labels, minlength=k)
    n_max = int(counts.max())
    if k == 1:
        targets = np.array([n_max])
    else:
        targets = np.floor(n_max * imbalance_ratio ** (-np.arange(k) / (k - 1))).astype(int)
    short = np.flatnonzero(counts < targets)
    if short.size:
        c = int(short[0])
        raise InsufficientClassCount(
            f"class {c} has {counts[c]} examples but the decay needs {targets[c]}"
        )
    keep = np.zeros(ds.n, dtype=bool)
    remaining = targets.copy()
    for i, y in enumerate(ds.labels):
        if remaining[y] > 0:
            keep[i] = True
            remaining[y] -= 1
    return ds.take(np.flatnonzero(keep))


class BatchStream:
    """Seed-determined epoch permutations partitioned into fixed-size batches.

    The final partial batch of each epoch is dropped so the selection ratio
    stays constant. State is just (epoch, position); each epoch's order comes
    from default_rng((seed, epoch)).
    """

    def __init__(self, n: int, batch_size: int, seed: int, epoch: int = 0, position: int = 0):
        if batch_size < 1 or batch_size > n:
            raise InvalidDimensions(f"batch size {batch_size} invalid for {n} examples")
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = epoch
        self.position = position
        self._order = None
        self._order_epoch = -1

    @property
    def steps_per_epoch(self) -> int:
        return self.n // self.batch_size

    def _epoch_order(self):
        if self._order_epoch != self.epoch:
            self._order = np.random.default_rng((self.seed, self.epoch)).permutation(self.n)
            self._order_epoch = self.epoch
        return self._order

    def next_batch(self):
        """Next batch of indices and a flag marking the last batch of its epoch."""
        order = self._epoch_order()
        start = self.position * self.batch_size
        batch = order[start : start + self.batch_size].copy()
        self.position += 1
        epoch_end = self.position >= self.steps_per_epoch
        if epoch_end:
            self.epoch += 1
            self.position = 0
        return batch, epoch_end

    def state(self) -> dict:
        return {
            "n": self.n,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "epoch": self.epoch,
            "position": self.position,
        }

    @classmethod
    def from_state(cls, state: dict) -> "BatchStream":
        return cls(
            n=int(state["n"]),
            batch_size=int(state["batch_size"]),
            seed=int(state["seed"]),
            epoch=int(state["epoch"]),
            position=int(state["position"]),
        )
