"""Synthetic paired audio-visual dataset ("avtoy") and loaders.

Every sample has one label shared by an image and a waveform. The image is
an oriented, class-coloured grating; the waveform is a class-specific tone
pair. Each modality independently draws a signal strength per sample: most
samples are clear, a fraction are "weak" (signal mostly buried in noise),
so unimodal classifiers make errors that the other modality can correct.

On-disk layout of a dataset directory::

    manifest.json                  spec, seed, labels, frontend, counts
    {train,test}_images.npy        N×3×S×S float64 tensor files
    {train,test}_audio.f32(.json)  raw float32 clips with sidecar
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from spikedisc.audio import FrontendConfig, log_mel, network_input, read_wave, write_wave
from spikedisc.errors import ConfigError, ContractError
from spikedisc.io import load_tensor, save_tensor

SPLITS = ("train", "test")


@dataclass(frozen=True)
class AvToySpec:
    n_classes: int = 4
    per_class: int = 100
    test_fraction: float = 0.25
    image_size: int = 8
    sample_rate: int = 16000
    duration: float = 0.5
    image_noise: float = 0.6
    audio_noise: float = 0.5
    weak_fraction: float = 0.2
    weak_amplitude: float = 0.05

    def __post_init__(self):
        if self.n_classes < 2 or self.per_class < 2:
            raise ConfigError("need at least 2 classes with 2 samples each")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if not 0.0 <= self.weak_fraction <= 1.0:
            raise ConfigError("weak_fraction must lie in [0, 1]")
        if self.image_size < 4:
            raise ConfigError("image_size must be >= 4")
        if self.n_samples_audio < 1024:
            raise ConfigError("clips must hold at least 1024 samples")
        top = self._tone(self.n_classes - 1) * 2.0
        if top >= self.sample_rate / 2:
            raise ConfigError("too many classes for the sample rate")

    @property
    def n_samples_audio(self) -> int:
        return int(round(self.sample_rate * self.duration))

    @staticmethod
    def _tone(c: int) -> float:
        return 300.0 * 1.45**c

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown avtoy field(s): {sorted(set(d) - known)}")
        return cls(**d)

    def frontend(self) -> FrontendConfig:
        cfg = FrontendConfig(sample_rate=self.sample_rate, f_max=min(8000.0, self.sample_rate / 2))
        n = 1 + (self.n_samples_audio - cfg.n_fft) // cfg.hop
        return FrontendConfig(sample_rate=self.sample_rate, f_max=cfg.f_max, frames=n)


def _strengths(rng, n, spec):
    weak = rng.random(n) < spec.weak_fraction
    strong = rng.uniform(0.7, 1.0, n)
    return np.where(weak, spec.weak_amplitude * rng.random(n), strong)


def _images(rng, labels, spec):
    s, C = spec.image_size, spec.n_classes
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    amp = _strengths(rng, labels.size, spec)
    out = np.empty((labels.size, 3, s, s))
    for i, c in enumerate(labels):
        theta = np.pi * c / C + rng.normal(0.0, 0.08)
        freq = 2 * np.pi * (1.5 + 0.5 * (c % 2)) / s
        phase = rng.uniform(0, 2 * np.pi)
        grating = np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        colour = 0.5 + 0.5 * np.cos(2 * np.pi * (c / C + np.arange(3) / 3))
        out[i] = amp[i] * colour[:, None, None] * grating + spec.image_noise * rng.standard_normal((3, s, s))
    return out


def _waves(rng, labels, spec):
    n = spec.n_samples_audio
    t = np.arange(n) / spec.sample_rate
    amp = _strengths(rng, labels.size, spec)
    out = np.empty((labels.size, n))
    for i, c in enumerate(labels):
        f0 = spec._tone(int(c)) * (1.0 + rng.uniform(-0.02, 0.02))
        ph = rng.uniform(0, 2 * np.pi, 2)
        tone = np.sin(2 * np.pi * f0 * t + ph[0]) + 0.5 * np.sin(4 * np.pi * f0 * t + ph[1])
        out[i] = 0.2 * amp[i] * tone + 0.2 * spec.audio_noise * rng.standard_normal(n)
    return out


def generate_avtoy(spec: AvToySpec, seed: int, out_dir) -> Path:
    """Write a dataset directory. The same (spec, seed) gives byte-identical files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    n_test = int(round(spec.per_class * spec.test_fraction))
    if not 0 < n_test < spec.per_class:
        raise ConfigError("test_fraction leaves an empty split")
    split_labels = {"train": [], "test": []}
    for c in range(spec.n_classes):
        split_labels["test"] += [c] * n_test
        split_labels["train"] += [c] * (spec.per_class - n_test)
    manifest = {
        "kind": "avtoy",
        "spec": asdict(spec),
        "seed": int(seed),
        "frontend": spec.frontend().to_dict(),
        "num_classes": spec.n_classes,
        "splits": {},
    }
    for split in SPLITS:
        labels = rng.permutation(np.array(split_labels[split]))
        save_tensor(out / f"{split}_images.npy", _images(rng, labels, spec))
        write_wave(out / f"{split}_audio.f32", _waves(rng, labels, spec), spec.sample_rate)
        counts = np.bincount(labels, minlength=spec.n_classes)
        manifest["splits"][split] = {"labels": labels.tolist(), "class_counts": counts.tolist()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return out


@dataclass
class Split:
    labels: np.ndarray
    images: np.ndarray | None = None
    audio: np.ndarray | None = None  # N×1×mels×frames network inputs

    def inputs(self, modality: str) -> np.ndarray:
        x = {"visual": self.images, "audio": self.audio}.get(modality)
        if x is None:
            raise ConfigError(f"dataset has no {modality!r} inputs")
        return x


def read_manifest(data_dir) -> dict:
    path = Path(data_dir) / "manifest.json"
    if not path.exists():
        raise ConfigError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())


def audio_inputs(waves, frontend: FrontendConfig) -> np.ndarray:
    """Log-mel network inputs in [0, 1], shape N×1×mels×frames."""
    db = [network_input(log_mel(w, frontend), frontend.top_db or 80.0) for w in waves]
    return np.stack(db)[:, None]


def load_split(data_dir, split: str, modalities=("visual", "audio")) -> Split:
    if split not in SPLITS:
        raise ConfigError(f"split must be one of {SPLITS}")
    data_dir = Path(data_dir)
    manifest = read_manifest(data_dir)
    labels = np.array(manifest["splits"][split]["labels"], dtype=int)
    out = Split(labels)
    if "visual" in modalities:
        out.images = load_tensor(data_dir / f"{split}_images.npy")
    if "audio" in modalities:
        waves, _ = read_wave(data_dir / f"{split}_audio.f32")
        out.audio = audio_inputs(np.atleast_2d(waves), FrontendConfig(**manifest["frontend"]))
    for x in (out.images, out.audio):
        if x is not None and len(x) != labels.size:
            raise ContractError(f"{split}: {len(x)} inputs but {labels.size} labels")
    return out


def nearest_centroid_accuracy(train_x, train_y, test_x, test_y) -> float:
    """Accuracy of a Euclidean nearest-class-mean classifier on flattened inputs."""
    a = train_x.reshape(len(train_x), -1)
    b = test_x.reshape(len(test_x), -1)
    classes = np.unique(train_y)
    centroids = np.stack([a[train_y == c].mean(axis=0) for c in classes])
    d = ((b[:, None, :] - centroids[None]) ** 2).sum(axis=2)
    return float(np.mean(classes[d.argmin(axis=1)] == test_y))


def gaussian_toy(n_per_class=100, n_classes=3, spread=0.6, seed=0):
    """Well-separated 2-D Gaussian blobs on a circle of radius 2."""
    rng = np.random.default_rng(seed)
    angles = 2 * np.pi * np.arange(n_classes) / n_classes
    centres = 2.0 * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    y = np.repeat(np.arange(n_classes), n_per_class)
    x = centres[y] + spread * rng.standard_normal((y.size, 2))
    perm = rng.permutation(y.size)
    return x[perm], y[perm]
