"""Tensor files and model checkpoints.

Tensor files are ``.npy`` arrays stored as little-endian float64 (``<f8``).
Checkpoints are ``.npz`` containers: every parameter, BN buffer and
optimizer moment as a ``<f8`` array, plus a ``__meta__`` entry holding a
UTF-8 JSON document (modality, model config, epoch, config hash, ...).
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from spikedisc.errors import ConfigError


def save_tensor(path, array) -> None:
    with open(path, "wb") as fh:
        np.save(fh, np.asarray(array, dtype="<f8"), allow_pickle=False)


def load_tensor(path) -> np.ndarray:
    return np.load(path, allow_pickle=False).astype(np.float64)


def config_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    """Write arrays and metadata deterministically (fixed member order and timestamps)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.asarray(arrays[name], dtype="<f8"), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())
        info = zipfile.ZipInfo("__meta__.json", date_time=(1980, 1, 1, 0, 0, 0))
        zf.writestr(info, json.dumps(meta, sort_keys=True, indent=1))
    tmp.replace(path)


def load_checkpoint(path):
    """Return ``(arrays, meta)``."""
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    arrays = {}
    with zf:
        meta = json.loads(zf.read("__meta__.json"))
        for name in zf.namelist():
            if name.endswith(".npy"):
                arrays[name[:-4]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    return arrays, meta
