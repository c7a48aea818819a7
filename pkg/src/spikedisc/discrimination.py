"""Feature-discrimination analysis.

Feature banks hold one accumulated feature vector per sample (the sum of
the pre-head features over all time steps). From a bank we build the
class-sorted cosine-distance matrix, summarize intra- versus inter-class
distances, and probe the two membrane-potential arguments about the
output layer: first-step dominance of the true class, and the closed-form
weighted sum for the potential of a non-resetting output neuron.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from spikedisc.errors import ContractError, DegenerateEmbeddingError
from spikedisc.io import load_tensor, save_tensor
from spikedisc.neurons import LIFConfig, lif_sequence

log = logging.getLogger(__name__)

TIE_TOL = 1e-12


@dataclass
class FeatureBank:
    features: np.ndarray  # N×d accumulated features
    labels: np.ndarray  # N class indices
    modality: str = "unknown"
    split: str = "train"
    head: str = "l2norm"
    zero_norm: list = field(default_factory=list)  # flagged sample ids

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=int)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ContractError("features must be N×d with one label per row")
        norms = np.linalg.norm(self.features, axis=1)
        zero = sorted(int(i) for i in np.nonzero(norms == 0.0)[0])
        unflagged = set(zero) - set(self.zero_norm)
        if unflagged:
            self.zero_norm = sorted(set(self.zero_norm) | unflagged)
            log.warning("feature bank has %d zero-norm vector(s); flagged", len(unflagged))

    def __len__(self):
        return len(self.labels)

    def without_flagged(self) -> "FeatureBank":
        keep = np.setdiff1d(np.arange(len(self)), self.zero_norm)
        return FeatureBank(self.features[keep], self.labels[keep], self.modality, self.split, self.head)

    def save(self, path) -> None:
        """Write ``<path>`` (tensor file) and ``<path>.json`` (manifest)."""
        path = Path(path)
        save_tensor(path, self.features)
        manifest = {
            "labels": self.labels.tolist(),
            "modality": self.modality,
            "set": self.split,
            "head": self.head,
            "zero_norm": list(self.zero_norm),
        }
        Path(str(path) + ".json").write_text(json.dumps(manifest))

    @classmethod
    def load(cls, path) -> "FeatureBank":
        path = Path(path)
        manifest = json.loads(Path(str(path) + ".json").read_text())
        return cls(
            load_tensor(path),
            np.array(manifest["labels"], dtype=int),
            manifest.get("modality", "unknown"),
            manifest.get("set", "train"),
            manifest.get("head", "l2norm"),
            list(manifest.get("zero_norm", [])),
        )


@dataclass
class DistanceMatrix:
    values: np.ndarray  # n×n cosine distances in class-sorted order
    labels: np.ndarray  # labels in the same order
    order: np.ndarray  # original sample index of each row

    @property
    def class_sizes(self):
        classes, counts = np.unique(self.labels, return_counts=True)
        return classes, counts


def cosine_distance_matrix(bank: FeatureBank) -> DistanceMatrix:
    """``1 - f_i·f_j / (|f_i||f_j|)`` for all pairs, rows sorted by class (stable)."""
    norms = np.linalg.norm(bank.features, axis=1)
    bad = np.nonzero(norms == 0.0)[0]
    if bad.size:
        raise DegenerateEmbeddingError(
            f"zero feature vector(s) at sample ids {bad.tolist()}", bad.tolist()
        )
    order = np.argsort(bank.labels, kind="stable")
    unit = bank.features[order] / norms[order, None]
    sim = unit @ unit.T
    dist = np.clip(1.0 - sim, 0.0, 2.0)
    dist = 0.5 * (dist + dist.T)
    np.fill_diagonal(dist, 0.0)
    return DistanceMatrix(dist, bank.labels[order], order)


def intra_inter_stats(m: DistanceMatrix, labels=None) -> dict:
    """Mean same-class (off-diagonal) and cross-class distances, and their ratio.

    Classes with a single sample contribute no intra-class pairs (a warning
    is logged). The ratio is ``inf`` when intra is zero and inter positive,
    and ``nan`` when both are zero.
    """
    labels = m.labels if labels is None else np.asarray(labels)
    classes, counts = np.unique(labels, return_counts=True)
    if classes.size < 2:
        raise ContractError("need at least two classes")
    for c, n in zip(classes, counts):
        if n < 2:
            log.warning("class %s has a single sample; excluded from intra-class mean", c)
    same = labels[:, None] == labels[None, :]
    off = ~np.eye(len(labels), dtype=bool)
    intra_mask, inter_mask = same & off, ~same
    mean_intra = float(m.values[intra_mask].mean()) if intra_mask.any() else float("nan")
    mean_inter = float(m.values[inter_mask].mean())
    if mean_intra == 0.0:
        ratio = math.inf if mean_inter > 0 else math.nan
    else:
        ratio = mean_inter / mean_intra
    return {"mean_intra": mean_intra, "mean_inter": mean_inter, "separability_ratio": ratio}


@dataclass
class LemmaProbe:
    """Output-layer weights (C×n) and per-step features (T×N×n) of one trained network."""

    weights: np.ndarray
    features: np.ndarray
    beta: float = 0.9

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 2:
            self.features = self.features[None]  # single step: N×n -> 1×N×n
        if self.weights.shape[1] != self.features.shape[-1]:
            raise ContractError(
                f"weight dim {self.weights.shape[1]} != feature dim {self.features.shape[-1]}"
            )


def lemma1_check(probe: LemmaProbe, labels, correct=None) -> dict:
    """First-step dominance of the true class among correctly classified samples.

    For each sample, the first-step features ``a`` must satisfy
    ``a·w_true > a·w_j + tol`` for every other class j. A sample whose best
    competitor is within ``tol`` is a tie and counts as a violation.
    """
    labels = np.asarray(labels, dtype=int)
    a0 = probe.features[0]
    scores = a0 @ probe.weights.T
    mask = np.ones(len(labels), bool) if correct is None else np.asarray(correct, bool)
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return {"n": 0, "violations": 0, "ties": 0, "violation_rate": float("nan"), "margins": np.array([])}
    s = scores[idx]
    true = s[np.arange(idx.size), labels[idx]]
    other = s.copy()
    other[np.arange(idx.size), labels[idx]] = -np.inf
    best_other = other.max(axis=1)
    margin = true - best_other
    ties = np.abs(margin) <= TIE_TOL
    violations = margin <= TIE_TOL
    # angular margin: difference of cosines between the first-step feature and class weights
    anorm = np.linalg.norm(a0[idx], axis=1)
    wnorm = np.linalg.norm(probe.weights, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        cos = s / (anorm[:, None] * wnorm[None, :])
    cos_true = cos[np.arange(idx.size), labels[idx]]
    cos[np.arange(idx.size), labels[idx]] = -np.inf
    angular = cos_true - cos.max(axis=1)
    return {
        "n": int(idx.size),
        "violations": int(violations.sum()),
        "ties": int(ties.sum()),
        "violation_rate": float(violations.mean()),
        "margins": margin,
        "angular_margins": angular,
    }


def lemma2_series(probe: LemmaProbe) -> np.ndarray:
    """Closed-form output potentials V[t] for t = 1..T (T×N×C).

    ``V[t] = sum_{k=0}^{t-1} beta^k (a[t-1-k] · w)``: the step taken k
    steps before t is discounted by beta^k.
    """
    dots = np.einsum("tnd,cd->tnc", probe.features, probe.weights)
    T = dots.shape[0]
    out = np.empty_like(dots)
    for t in range(1, T + 1):
        lags = np.arange(t)
        coeff = np.power(probe.beta, lags)  # 0**0 == 1
        out[t - 1] = np.tensordot(coeff, dots[t - 1 - lags], axes=(0, 0))
    return out


def lemma2_series_check(probe: LemmaProbe) -> float:
    """Max |closed-form series - simulated non-resetting LIF potential| over all steps."""
    dots = np.einsum("tnd,cd->tnc", probe.features, probe.weights)
    cfg = LIFConfig(beta=probe.beta, v_th=1.0, reset="none")
    _, simulated = lif_sequence(dots, cfg, return_potentials=True)
    return float(np.max(np.abs(lemma2_series(probe) - simulated)))


def export_heatmap_data(m: DistanceMatrix, path) -> tuple[Path, Path]:
    """Write the matrix as CSV plus a ``.classes.json`` sidecar with class boundaries."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        for row in m.values:
            w.writerow([repr(float(v)) for v in row])
    classes, counts = m.class_sizes
    sidecar = path.with_suffix(".classes.json")
    sidecar.write_text(
        json.dumps(
            {
                "classes": classes.tolist(),
                "sizes": counts.tolist(),
                "boundaries": np.cumsum(counts).tolist(),
                "labels": m.labels.tolist(),
                "order": m.order.tolist(),
            },
            indent=1,
        )
    )
    return path, sidecar


def read_heatmap_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])
