"""Spike-count targets, the MSE count loss, accuracy and confusion matrices."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from spikedisc import tensor as tt
from spikedisc.errors import ConfigError, ContractError, DimensionError
from spikedisc.tensor import Tensor


@dataclass(frozen=True)
class RateTargets:
    """Desired firing ratios of the true class and of every other class."""

    r_correct: float = 0.9
    r_incorrect: float = 0.1

    def __post_init__(self):
        if not 0.0 < self.r_correct <= 1.0 or not 0.0 <= self.r_incorrect < 1.0:
            raise ConfigError("rates must satisfy 0 < r_correct <= 1 and 0 <= r_incorrect < 1")
        if not self.r_correct > self.r_incorrect:
            raise ConfigError("r_correct must exceed r_incorrect")


def spike_targets(labels, rt: RateTargets, num_classes: int, T: int) -> np.ndarray:
    """B×C target counts: ``T*r_correct`` at the label, ``T*r_incorrect`` elsewhere."""
    labels = np.asarray(labels, dtype=int)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ContractError(f"labels must lie in [0, {num_classes})")
    out = np.full((labels.size, num_classes), T * rt.r_incorrect)
    out[np.arange(labels.size), labels] = T * rt.r_correct
    return out


def mse_count_loss(counts, target) -> Tensor:
    """Mean over samples and classes of the squared count error."""
    counts = tt.as_tensor(counts)
    target = tt.as_tensor(target)
    if counts.shape != target.shape:
        raise DimensionError(f"counts {counts.shape} and targets {target.shape} differ")
    diff = counts - target
    sq = diff * diff
    n = max(sq.data.size, 1)
    # exact summation keeps the value independent of batch layout

    def bw(g):
        return (np.full(sq.shape, np.asarray(g) / n),)

    return tt.record((sq,), np.asarray(math.fsum(sq.data.ravel().tolist()) / n), bw)


def predict(counts) -> np.ndarray:
    """Argmax over classes; ties resolve to the lowest class index."""
    return np.asarray(counts.data if isinstance(counts, Tensor) else counts).argmax(axis=1)


def confusion_matrix(labels, preds, num_classes: int) -> np.ndarray:
    """Row-normalized confusion matrix; rows of absent classes are all zero."""
    m = np.zeros((num_classes, num_classes))
    np.add.at(m, (np.asarray(labels, dtype=int), np.asarray(preds, dtype=int)), 1.0)
    totals = m.sum(axis=1, keepdims=True)
    return np.divide(m, totals, out=np.zeros_like(m), where=totals > 0)


def accuracy_and_confusion(counts, labels, num_classes: int | None = None):
    labels = np.asarray(labels, dtype=int)
    if labels.size == 0:
        raise ContractError("need at least one sample")
    counts = np.asarray(counts.data if isinstance(counts, Tensor) else counts)
    num_classes = counts.shape[1] if num_classes is None else num_classes
    preds = predict(counts)
    return float(np.mean(preds == labels)), confusion_matrix(labels, preds, num_classes)


def write_confusion_csv(matrix: np.ndarray, path, class_names=None) -> None:
    """One row per true class: the row label followed by C rates."""
    names = class_names or [str(i) for i in range(matrix.shape[0])]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for name, row in zip(names, matrix):
            w.writerow([name, *(repr(float(v)) for v in row)])


def read_confusion_csv(path):
    names, rows = [], []
    with open(path, newline="") as fh:
        for rec in csv.reader(fh):
            names.append(rec[0])
            rows.append([float(v) for v in rec[1:]])
    return names, np.array(rows)
