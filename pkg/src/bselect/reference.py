"""File-backed reference predictor: raw per-example logits plus a temperature.

Stands in both for the fixed zero-shot predictor that anchors the selection
objective and, loaded from a second file, for a holdout model in the
irreducible-loss baseline. Logits are stored raw and the temperature is
applied at query time, so temperature sweeps need no file regeneration.

File format: header line ``k=<int> n=<int> tau=<float>`` followed by one
line per example, ``id logit_0 ... logit_{k-1}``, space-separated UTF-8
decimal floats, ids covering 0..n-1 exactly once.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DimensionMismatch, IndexOutOfRange, MissingExample, ParseError
from .numerics import log_softmax


@dataclass(frozen=True)
class ReferenceTable:
    logits: np.ndarray  # (n, k) raw logits, row index == example id
    temperature: float
    provenance: str = ""

    @property
    def n(self) -> int:
        return self.logits.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    def with_temperature(self, temperature: float) -> "ReferenceTable":
        if not temperature > 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        return replace(self, temperature=float(temperature))


def load_reference(path) -> ReferenceTable:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: empty reference file")
    header = dict()
    for token in lines[0].split():
        if "=" not in token:
            raise ParseError(f"{path}: malformed header token {token!r}")
        key, _, value = token.partition("=")
        header[key] = value
    try:
        k = int(header["k"])
        n = int(header["n"])
        tau = float(header["tau"])
    except (KeyError, ValueError) as exc:
        raise ParseError(f"{path}: header must carry k=<int> n=<int> tau=<float>") from exc
    if k < 1 or n < 0 or not tau > 0:
        raise ParseError(f"{path}: invalid header values k={k} n={n} tau={tau}")

    logits = np.full((n, k), np.nan)
    seen = np.zeros(n, dtype=bool)
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split()
        try:
            example_id = int(fields[0])
            row = [float(v) for v in fields[1:]]
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: unparseable row") from exc
        if len(row) != k:
            raise DimensionMismatch(f"{path}:{lineno}: expected {k} logits, got {len(row)}")
        if not 0 <= example_id < n:
            raise ParseError(f"{path}:{lineno}: id {example_id} outside 0..{n - 1}")
        if seen[example_id]:
            raise ParseError(f"{path}:{lineno}: duplicate id {example_id}")
        seen[example_id] = True
        logits[example_id] = row
    if not seen.all():
        raise MissingExample(int(np.flatnonzero(~seen)[0]))
    if not np.all(np.isfinite(logits)):
        raise ParseError(f"{path}: non-finite logits")
    return ReferenceTable(logits=logits, temperature=tau, provenance=str(path))


def save_reference(table: ReferenceTable, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"k={table.num_classes} n={table.n} tau={table.temperature!r}\n")
        for i, row in enumerate(table.logits):
            fh.write(f"{i} " + " ".join(repr(float(v)) for v in row) + "\n")


def ref_log_prob(table: ReferenceTable, example_id: int, label: int) -> float:
    """log softmax(logits[id] / temperature)[label]."""
    if not 0 <= example_id < table.n:
        raise IndexOutOfRange(f"example id {example_id} outside 0..{table.n - 1}")
    if not 0 <= label < table.num_classes:
        raise IndexOutOfRange(f"label {label} outside 0..{table.num_classes - 1}")
    return float(log_softmax(table.logits[example_id] / table.temperature)[label])


def ref_log_prob_batch(table: ReferenceTable, example_ids, labels) -> np.ndarray:
    ids = np.asarray(example_ids, dtype=int)
    labels = np.asarray(labels, dtype=int)
    if ids.size and (ids.min() < 0 or ids.max() >= table.n):
        raise IndexOutOfRange("example id outside table range")
    if labels.size and (labels.min() < 0 or labels.max() >= table.num_classes):
        raise IndexOutOfRange("label outside class range")
    lsm = log_softmax(table.logits[ids] / table.temperature, axis=-1)
    return lsm[np.arange(ids.size), labels]


def ref_accuracy(table: ReferenceTable, labels) -> float:
    """Fraction of examples whose argmax logit equals the label (ties -> lower class)."""
    labels = np.asarray(labels, dtype=int)
    if labels.shape[0] != table.n:
        raise DimensionMismatch(f"{labels.shape[0]} labels for a table of {table.n} examples")
    return float(np.mean(np.argmax(table.logits, axis=1) == labels))


def build_prototype_reference(
    features, clean_labels, num_classes, clean_frac=1.0, seed=0, temperature=1.0
) -> ReferenceTable:
    """Nearest-class-mean predictor fitted on a random clean-labelled subset.

    Produces logit_c(x) = x . mu_c - ||mu_c||^2 / 2, whose argmax is the
    nearest class mean; classes absent from the subset fall back to the
    subset's global mean. A desk-scale stand-in for an external zero-shot
    predictor.
    """
    features = np.asarray(features, dtype=float)
    clean_labels = np.asarray(clean_labels, dtype=int)
    n = features.shape[0]
    if not 0 < clean_frac <= 1:
        raise ValueError(f"clean_frac must lie in (0, 1], got {clean_frac}")
    m = max(1, int(round(clean_frac * n)))
    idx = np.random.default_rng(seed).choice(n, size=m, replace=False)
    sub_x, sub_y = features[idx], clean_labels[idx]
    fallback = sub_x.mean(axis=0)
    means = np.empty((num_classes, features.shape[1]))
    for c in range(num_classes):
        mask = sub_y == c
        means[c] = sub_x[mask].mean(axis=0) if mask.any() else fallback
    logits = features @ means.T - 0.5 * np.sum(means**2, axis=1)
    return ReferenceTable(
        logits=logits,
        temperature=float(temperature),
        provenance=f"prototype(clean_frac={clean_frac}, seed={seed})",
    )
