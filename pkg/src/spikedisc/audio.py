"""Waveform to log-mel spectrogram: Hann-windowed STFT, HTK mel filterbank, dB scaling.

Also reads and writes raw little-endian float32 waveform files, each with
a JSON sidecar holding ``sample_rate`` and ``length`` (and ``count`` when
the file stores several equal-length clips back to back).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from spikedisc.errors import ConfigError, ContractError


@dataclass(frozen=True)
class StftConfig:
    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 256

    def __post_init__(self):
        if not 0 < self.hop <= self.n_fft:
            raise ConfigError("hop must satisfy 0 < hop <= n_fft")
        if self.n_fft <= 0 or self.n_fft & (self.n_fft - 1):
            raise ConfigError("n_fft must be a power of two")


@dataclass(frozen=True)
class MelConfig:
    n_mels: int = 64
    f_min: float = 0.0
    f_max: float = 8000.0


@dataclass(frozen=True)
class FrontendConfig:
    """Full log-mel pipeline settings, including the fixed frame count fed to the network."""

    sample_rate: int = 16000
    n_fft: int = 1024
    hop: int = 256
    n_mels: int = 64
    f_min: float = 0.0
    f_max: float = 8000.0
    top_db: float | None = 80.0
    frames: int | None = None

    @property
    def stft(self):
        return StftConfig(self.sample_rate, self.n_fft, self.hop)

    @property
    def mel(self):
        return MelConfig(self.n_mels, self.f_min, self.f_max)

    def to_dict(self):
        return asdict(self)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def frame_count(length: int, n_fft: int, hop: int) -> int:
    return 1 + (length - n_fft) // hop


def stft(wave, cfg: StftConfig) -> np.ndarray:
    """One-sided power spectrogram, shape frames × (n_fft/2 + 1)."""
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise ContractError("stft expects a mono 1-D waveform")
    if wave.size < cfg.n_fft:
        raise ContractError(f"waveform has {wave.size} samples, needs at least n_fft={cfg.n_fft}")
    n = frame_count(wave.size, cfg.n_fft, cfg.hop)
    frames = np.lib.stride_tricks.sliding_window_view(wave, cfg.n_fft)[:: cfg.hop][:n]
    window = np.hanning(cfg.n_fft + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(frames * window, axis=1)
    return spec.real**2 + spec.imag**2


def mel_filterbank(cfg: MelConfig, n_fft: int, sample_rate: int) -> np.ndarray:
    """Triangular filters with centres uniformly spaced on the mel scale."""
    nyquist = sample_rate / 2.0
    if cfg.f_max > nyquist:
        raise ConfigError(f"f_max={cfg.f_max} exceeds Nyquist frequency {nyquist}")
    if not 0.0 <= cfg.f_min < cfg.f_max:
        raise ConfigError("need 0 <= f_min < f_max")
    freqs = np.linspace(0.0, nyquist, n_fft // 2 + 1)
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    lower, centre, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lower) / (centre - lower)
    falling = (upper - freqs) / (upper - centre)
    return np.maximum(0.0, np.minimum(rising, falling))


def power_to_db(power, ref=1.0, amin: float = 1e-10, top_db: float | None = 80.0) -> np.ndarray:
    """``10 log10(max(p, amin) / ref)``, optionally clipped to ``top_db`` below the maximum.

    ``ref`` may be a number or a callable applied to the power array
    (e.g. ``np.max``).
    """
    p = np.asarray(power, dtype=np.float64)
    ref = float(ref(p)) if callable(ref) else float(ref)
    if not ref > 0:
        raise ContractError("ref must be positive")
    db = 10.0 * np.log10(np.maximum(p, amin) / ref)
    if top_db is not None and db.size:
        db = np.maximum(db, db.max() - top_db)
    return db


def log_mel(wave, cfg: FrontendConfig, ref=np.max) -> np.ndarray:
    """Log-mel spectrogram, shape n_mels × frames, padded/trimmed to ``cfg.frames`` if set."""
    power = stft(wave, cfg.stft)
    fb = mel_filterbank(cfg.mel, cfg.n_fft, cfg.sample_rate)
    mel = power @ fb.T
    db = power_to_db(mel, ref=ref if np.any(mel > 0) else 1.0, top_db=cfg.top_db).T
    if cfg.frames is not None:
        if db.shape[1] >= cfg.frames:
            db = db[:, : cfg.frames]
        else:
            db = np.pad(db, ((0, 0), (0, cfg.frames - db.shape[1])), constant_values=db.min())
    return db


def network_input(db: np.ndarray, top_db: float = 80.0) -> np.ndarray:
    """Map dB values in [max - top_db, max] to [0, 1] for direct-current injection."""
    return np.clip((db - db.max() + top_db) / top_db, 0.0, 1.0)


def write_wave(path, samples, sample_rate: int) -> None:
    """Raw little-endian float32 samples plus a ``.json`` sidecar."""
    path = Path(path)
    samples = np.asarray(samples)
    samples.astype("<f4").tofile(path)
    meta = {"sample_rate": int(sample_rate), "length": int(samples.shape[-1])}
    if samples.ndim == 2:
        meta["count"] = int(samples.shape[0])
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=2))


def read_wave(path):
    """Return ``(samples, sample_rate)``; multi-clip files come back as count × length."""
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    data = np.fromfile(path, dtype="<f4").astype(np.float64)
    count = meta.get("count")
    expected = meta["length"] * (count or 1)
    if data.size != expected:
        raise ContractError(f"{path} holds {data.size} samples, sidecar says {expected}")
    if count is not None:
        data = data.reshape(count, meta["length"])
    return data, meta["sample_rate"]
