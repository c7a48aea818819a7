"""Experiment runner: Adam, milestone schedule, training loop, checkpoints, evaluation, fusion.

A run is fully described by an :class:`ExperimentConfig` (usually read
from a TOML file). Given the same config and build, a run is bit-for-bit
reproducible: all randomness flows from one seeded generator whose state
is saved in every checkpoint, so resuming continues the exact trajectory.
"""

from __future__ import annotations

import csv
import logging
import os
import sys
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from spikedisc import tensor as tt
from spikedisc.discrimination import FeatureBank
from spikedisc.errors import ConfigError, NumericFault
from spikedisc.io import config_hash, load_checkpoint, save_checkpoint
from spikedisc.losses import RateTargets, accuracy_and_confusion, mse_count_loss, spike_targets, write_confusion_csv
from spikedisc.models import MODEL_CONFIGS, ModelGraph, build_model
from spikedisc.neurons import SurrogateSpec

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

log = logging.getLogger(__name__)

MODALITIES = ("visual", "audio", "fusion")

# ablation toggle -> model config overrides
ABLATIONS = {
    "lif_after_bn": {"variant": "lif_after_bn"},
    "lif_before_add": {"variant": "lif_before_add"},
    "no_dropout": {"with_dropout": False},
    "no_third_block": {"with_third_block": False},
    "no_pooling": {"with_pooling": False},
}
ABLATION_MODALITY = {
    "lif_after_bn": "visual",
    "lif_before_add": "visual",
    "no_dropout": "audio",
    "no_third_block": "audio",
    "no_pooling": "audio",
}

METRIC_FIELDS = ("epoch", "lr", "train_loss", "train_acc", "test_loss", "test_acc")


# --- optimizer and schedule -------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0) -> AdamState:
    """One bias-corrected Adam update, in place on ``params[name].data``.

    L2 regularization is added to the gradient (``g + weight_decay * p``).
    A parameter whose gradient is None is treated as having zero gradient.
    """
    state.step += 1
    t = state.step
    c1, c2 = 1.0 - beta1**t, 1.0 - beta2**t
    for name, p in params.items():
        data = p.data if isinstance(p, tt.Tensor) else p
        g = grads.get(name)
        g = np.zeros_like(data) if g is None else np.asarray(g, dtype=np.float64)
        if weight_decay:
            g = g + weight_decay * data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(data)
            state.v[name] = np.zeros_like(data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def milestone_lr(epoch: int, base_lr: float, milestones=(), gamma: float = 0.1) -> float:
    """``base_lr * gamma**k`` where k counts milestones <= epoch."""
    k = sum(1 for m in milestones if m <= epoch)
    return base_lr * gamma**k


# --- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2e-3
    weight_decay: float = 0.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8


@dataclass(frozen=True)
class SchedulerConfig:
    milestones: tuple = ()
    gamma: float = 0.1


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything that defines one training run.

    ``model`` holds overrides on top of the ``preset`` model config
    ("desk" or "paper"). ``surrogate`` (if given) replaces the model's
    neuron surrogate, and ``ablation`` names a single variant toggle.
    """

    modality: str = "visual"
    preset: str = "desk"
    model: dict = field(default_factory=dict)
    T: int = 8
    batch_size: int = 32
    epochs: int = 10
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    rates: RateTargets = field(default_factory=RateTargets)
    surrogate: dict | None = None
    ablation: str | None = None
    seed: int = 0
    data_dir: str = "data"
    out_dir: str = "runs/default"
    visual_ckpt: str | None = None
    audio_ckpt: str | None = None

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise ConfigError(f"modality must be one of {MODALITIES}, got {self.modality!r}")
        if self.preset not in ("desk", "paper"):
            raise ConfigError("preset must be 'desk' or 'paper'")
        if self.T < 1 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("need T >= 1, batch_size >= 1, epochs >= 0")
        ms = list(self.scheduler.milestones)
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ConfigError("scheduler milestones must be strictly increasing")
        if ms and ms[-1] >= self.epochs:
            raise ConfigError(f"milestone {ms[-1]} is not below epochs={self.epochs}")
        if not self.optimizer.lr > 0:
            raise ConfigError("learning rate must be positive")
        if self.ablation is not None:
            if self.ablation not in ABLATIONS:
                raise ConfigError(f"unknown ablation {self.ablation!r}; expected one of {sorted(ABLATIONS)}")
            if ABLATION_MODALITY[self.ablation] != self.modality:
                raise ConfigError(f"ablation {self.ablation!r} applies to the {ABLATION_MODALITY[self.ablation]} model")
        self.model_config()  # validate eagerly

    def model_config(self):
        cls = MODEL_CONFIGS[self.modality]
        base = cls.desk() if self.preset == "desk" else cls()
        d = base.to_dict()
        d.update(self.model)
        if self.ablation:
            d.update(ABLATIONS[self.ablation])
        if self.surrogate is not None:
            neuron = dict(d["neuron"])
            neuron["surrogate"] = dict(self.surrogate)
            d["neuron"] = neuron
        try:
            return cls.from_dict(d)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["optimizer"]["betas"] = list(self.optimizer.betas)
        d["scheduler"]["milestones"] = list(self.scheduler.milestones)
        return d

    def trajectory_hash(self) -> str:
        """Hash of the fields that shape the training trajectory (not epochs or paths)."""
        d = self.to_dict()
        for k in ("epochs", "out_dir", "data_dir", "visual_ckpt", "audio_ckpt"):
            d.pop(k)
        d["model"] = self.model_config().to_dict()
        return config_hash(d)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        if set(d) - known:
            raise ConfigError(f"unknown config key(s): {sorted(set(d) - known)}")
        try:
            if "optimizer" in d:
                o = dict(d["optimizer"])
                if "betas" in o:
                    o["betas"] = tuple(o["betas"])
                d["optimizer"] = OptimizerConfig(**o)
            if "scheduler" in d:
                s = dict(d["scheduler"])
                s["milestones"] = tuple(s.get("milestones", ()))
                d["scheduler"] = SchedulerConfig(**s)
            if "rates" in d:
                d["rates"] = RateTargets(**d["rates"])
            if "surrogate" in d and d["surrogate"] is not None:
                SurrogateSpec(**d["surrogate"])
            if d.get("ablation") in ("", "none"):
                d["ablation"] = None
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"bad config: {exc}") from None

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        flat = dict(raw.pop("experiment", {}))
        flat.update(raw)
        return cls.from_dict(flat)


# --- threads ----------------------------------------------------------------


@contextmanager
def thread_limit():
    """Cap BLAS threads at ``SPIKEDISC_THREADS`` when that variable is set."""
    value = os.environ.get("SPIKEDISC_THREADS")
    if not value:
        yield
        return
    try:
        n = int(value)
    except ValueError:
        raise ConfigError(f"SPIKEDISC_THREADS must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=max(1, n)):
        yield


# --- forward helpers --------------------------------------------------------


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    confusion: np.ndarray
    counts: np.ndarray
    features: np.ndarray  # N×d accumulated (summed over time) features
    first_step: np.ndarray  # N×d features at the first time step
    labels: np.ndarray

    @property
    def predictions(self):
        return self.counts.argmax(axis=1)


def evaluate_arrays(model: ModelGraph, x, labels, T: int, rates: RateTargets, batch_size: int = 64) -> EvalResult:
    """Eval-mode pass over a dataset; no gradients, no state change."""
    model.eval()
    C = model.head.num_classes
    counts, feats, first, losses = [], [], [], []
    for i in range(0, len(labels), batch_size):
        xb, yb = x[i : i + batch_size], labels[i : i + batch_size]
        res = model.forward_multistep(xb, T)
        target = spike_targets(yb, rates, C, T)
        losses.append(mse_count_loss(res.counts, target).item() * len(yb))
        counts.append(res.counts.data)
        feats.append(res.embeddings.data.sum(axis=0))
        first.append(res.embeddings.data[0])
    counts = np.concatenate(counts)
    acc, conf = accuracy_and_confusion(counts, labels, C)
    return EvalResult(acc, sum(losses) / len(labels), conf, counts, np.concatenate(feats), np.concatenate(first),
                      np.asarray(labels))


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def _write_metrics(path: Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_FIELDS)
        for r in rows:
            w.writerow([_fmt(r[k]) for k in METRIC_FIELDS])


def read_metrics(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(v) if k == "epoch" else float(v)) for k, v in r.items()} for r in rows]


# --- checkpoints ------------------------------------------------------------


def save_model_checkpoint(path, model: ModelGraph, cfg: ExperimentConfig, epoch: int,
                          adam: AdamState | None = None, rng=None, extra: dict | None = None) -> None:
    arrays = dict(model.state_arrays())
    if adam is not None:
        for k, m in adam.m.items():
            arrays[f"adam_m/{k}"] = m
            arrays[f"adam_v/{k}"] = adam.v[k]
    meta = {
        "format": 1,
        "modality": model.modality,
        "model_config": model.config.to_dict() if model.config is not None else None,
        "experiment": cfg.to_dict(),
        "config_hash": cfg.trajectory_hash(),
        "epoch": int(epoch),
        "adam_step": adam.step if adam is not None else 0,
        "rng_state": rng.bit_generator.state if rng is not None else None,
    }
    meta.update(extra or {})
    save_checkpoint(path, arrays, meta)


def load_model(path):
    """Rebuild a model from a checkpoint. Returns ``(model, meta, arrays)``."""
    arrays, meta = load_checkpoint(path)
    cls = MODEL_CONFIGS.get(meta.get("modality"))
    if cls is None:
        raise ConfigError(f"{path}: unknown modality {meta.get('modality')!r}")
    model = build_model(meta["modality"], cls.from_dict(meta["model_config"]))
    model.load_state_arrays(arrays)
    return model.eval(), meta, arrays


# --- training ---------------------------------------------------------------


@dataclass
class TrainResult:
    model: ModelGraph
    metrics: list
    out_dir: Path
    last_ckpt: Path
    best_ckpt: Path


def fit(model: ModelGraph, cfg: ExperimentConfig, train_x, train_y, test_x, test_y,
        resume: str | Path | None = None, extra_meta: dict | None = None) -> TrainResult:
    """Minibatch surrogate-gradient training with the MSE spike-count loss.

    After every epoch the train and test sets are re-evaluated in eval
    mode, a metrics row is appended to ``metrics.csv``, and ``last.ckpt``
    (and ``best.ckpt`` on a new best test accuracy) are written.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    last, best = out / "last.ckpt", out / "best.ckpt"
    rng = np.random.default_rng(cfg.seed)
    adam = AdamState()
    metrics: list[dict] = []
    start = 0
    best_acc = -1.0
    C = model.head.num_classes
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        if meta.get("config_hash") != cfg.trajectory_hash():
            raise ConfigError(f"refusing to resume: {resume} was written by a different configuration")
        model.load_state_arrays(arrays)
        adam.step = meta["adam_step"]
        for k in model.named_parameters():
            if f"adam_m/{k}" in arrays:
                adam.m[k] = np.array(arrays[f"adam_m/{k}"])
                adam.v[k] = np.array(arrays[f"adam_v/{k}"])
        if meta.get("rng_state"):
            rng.bit_generator.state = meta["rng_state"]
        start = meta["epoch"]
        if (out / "metrics.csv").exists():
            metrics = [r for r in read_metrics(out / "metrics.csv") if r["epoch"] <= start]
        best_acc = max((r["test_acc"] for r in metrics), default=-1.0)
    params = model.named_parameters()
    o = cfg.optimizer
    meta_extra = dict(extra_meta or {})
    if start == 0 and cfg.epochs == 0:
        save_model_checkpoint(last, model, cfg, 0, adam, rng, meta_extra)
        save_model_checkpoint(best, model, cfg, 0, adam, rng, meta_extra)
        _write_metrics(out / "metrics.csv", metrics)
    n = len(train_y)
    for epoch in range(start, cfg.epochs):
        lr = milestone_lr(epoch, o.lr, cfg.scheduler.milestones, cfg.scheduler.gamma)
        model.train()
        perm = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = perm[i : i + cfg.batch_size]
            target = spike_targets(train_y[idx], cfg.rates, C, cfg.T)
            with tt.Tape() as tape:
                res = model.forward_multistep(train_x[idx], cfg.T, rng)
                loss = mse_count_loss(res.counts, target)
            if not np.isfinite(loss.data):
                raise NumericFault(f"non-finite loss {loss.item()} at epoch {epoch}, batch {i // cfg.batch_size}")
            for p in params.values():
                p.grad = None
            tape.backward(loss)
            grads = {k: p.grad for k, p in params.items()}
            adam_step(params, grads, adam, lr, o.betas[0], o.betas[1], o.eps, o.weight_decay)
        tr = evaluate_arrays(model, train_x, train_y, cfg.T, cfg.rates)
        te = evaluate_arrays(model, test_x, test_y, cfg.T, cfg.rates)
        if not (np.isfinite(tr.loss) and np.isfinite(te.loss)):
            raise NumericFault(f"non-finite evaluation loss after epoch {epoch}")
        row = {"epoch": epoch + 1, "lr": lr, "train_loss": tr.loss, "train_acc": tr.accuracy,
               "test_loss": te.loss, "test_acc": te.accuracy}
        metrics.append(row)
        log.info("epoch %d  loss %.4f  train %.3f  test %.3f", epoch + 1, tr.loss, tr.accuracy, te.accuracy)
        _write_metrics(out / "metrics.csv", metrics)
        save_model_checkpoint(last, model, cfg, epoch + 1, adam, rng, meta_extra)
        if te.accuracy > best_acc:
            best_acc = te.accuracy
            save_model_checkpoint(best, model, cfg, epoch + 1, adam, rng, meta_extra)
    model.eval()
    return TrainResult(model, metrics, out, last, best)


def _modality_arrays(cfg: ExperimentConfig):
    from spikedisc.data import load_split

    mods = (cfg.modality,)
    tr = load_split(cfg.data_dir, "train", mods)
    te = load_split(cfg.data_dir, "test", mods)
    return tr.inputs(cfg.modality), tr.labels, te.inputs(cfg.modality), te.labels


def _labels_hash(labels_train, labels_test) -> str:
    return config_hash({"train": np.asarray(labels_train).tolist(), "test": np.asarray(labels_test).tolist()})


def dataset_labels_hash(data_dir) -> str:
    from spikedisc.data import read_manifest

    sp = read_manifest(data_dir)["splits"]
    return _labels_hash(sp["train"]["labels"], sp["test"]["labels"])


def _data_meta(cfg: ExperimentConfig, labels_train, labels_test) -> dict:
    return {"data_dir": str(cfg.data_dir), "labels_hash": _labels_hash(labels_train, labels_test)}


def train(cfg: ExperimentConfig, resume=None) -> TrainResult:
    """Train a unimodal model on the dataset in ``cfg.data_dir``."""
    if cfg.modality == "fusion":
        return run_fusion(cfg.visual_ckpt, cfg.audio_ckpt, cfg, resume=resume)
    with thread_limit():
        x, y, xt, yt = _modality_arrays(cfg)
        mcfg = cfg.model_config()
        expected = (mcfg.in_channels, mcfg.image_size, mcfg.image_size) if cfg.modality == "visual" \
            else (1, mcfg.n_mels, mcfg.frames)
        if x.shape[1:] != expected:
            raise ConfigError(f"dataset inputs have shape {x.shape[1:]}, model expects {expected}")
        if y.max() >= mcfg.num_classes:
            raise ConfigError(f"dataset has label {y.max()} but model has {mcfg.num_classes} classes")
        model = build_model(cfg.modality, mcfg, cfg.seed)
        return fit(model, cfg, x, y, xt, yt, resume, _data_meta(cfg, y, yt))


def evaluate(ckpt, data_dir, split: str = "test", export_features=None, confusion_csv=None,
             T: int | None = None) -> dict:
    """Evaluate a checkpoint on one split; optionally export the accumulated feature bank."""
    model, meta, _ = load_model(ckpt)
    exp = ExperimentConfig.from_dict(meta["experiment"])
    T = exp.T if T is None else T
    with thread_limit():
        x, labels = split_arrays(model, meta, data_dir, split)
        res = evaluate_arrays(model, x, labels, T, exp.rates)
    if confusion_csv is not None:
        write_confusion_csv(res.confusion, confusion_csv)
    out = {"accuracy": res.accuracy, "loss": res.loss, "n": int(labels.size), "split": split}
    if export_features is not None:
        bank = FeatureBank(res.features, labels, model.modality, split, model.config.head)
        bank.save(export_features)
        out["bank"] = str(export_features)
    out["result"] = res
    return out


def split_arrays(model: ModelGraph, meta: dict, data_dir, split: str):
    """Network inputs and labels of one split, checked against the model's input shape."""
    from spikedisc.data import load_split

    if model.modality == "fusion":
        x, labels = _fusion_split(meta, data_dir, split)
    else:
        s = load_split(data_dir, split, (model.modality,))
        x, labels = s.inputs(model.modality), s.labels
    if x.shape[1:] != _input_shape(model):
        raise ConfigError(f"checkpoint expects inputs {_input_shape(model)}, data has {x.shape[1:]}")
    return x, labels


def _input_shape(model: ModelGraph):
    c = model.config
    if model.modality == "visual":
        return (c.in_channels, c.image_size, c.image_size)
    if model.modality == "audio":
        return (1, c.n_mels, c.frames)
    return (c.input_dim,)


# --- fusion -----------------------------------------------------------------


def extract_embeddings(model: ModelGraph, x, T: int, batch_size: int = 64) -> np.ndarray:
    """Unit-norm time-averaged features; all-silent samples map to the zero vector."""
    model.eval()
    out = []
    for i in range(0, len(x), batch_size):
        z = model.forward_multistep(x[i : i + batch_size], T).embeddings.data.mean(axis=0)
        norm = np.linalg.norm(z, axis=1, keepdims=True)
        out.append(np.divide(z, norm, out=np.zeros_like(z), where=norm > 0))
    return np.concatenate(out)


def _unimodal(path, modality):
    model, meta, _ = load_model(path)
    if model.modality != modality:
        raise ConfigError(f"{path} holds a {model.modality} model, expected {modality}")
    return model, meta


def fusion_features(visual_ckpt, audio_ckpt, data_dir, split, shuffle_audio_seed=None):
    """Concatenated [visual | audio] embeddings of one split, plus labels."""
    from spikedisc.data import load_split

    vm, vmeta = _unimodal(visual_ckpt, "visual")
    am, ameta = _unimodal(audio_ckpt, "audio")
    if vmeta.get("labels_hash") != ameta.get("labels_hash"):
        raise ConfigError("visual and audio checkpoints were trained on differently labelled data")
    s = load_split(data_dir, split)
    if vmeta.get("labels_hash") is not None and vmeta["labels_hash"] != dataset_labels_hash(data_dir):
        raise ConfigError("dataset labels do not match the ones the extractors were trained on")
    vT = vmeta["experiment"]["T"]
    aT = ameta["experiment"]["T"]
    v = extract_embeddings(vm, s.images, vT)
    a = extract_embeddings(am, s.audio, aT)
    if shuffle_audio_seed is not None:
        a = a[np.random.default_rng(shuffle_audio_seed).permutation(len(a))]
    return np.concatenate([v, a], axis=1), s.labels


def _fusion_split(meta, data_dir, split):
    fm = meta.get("fusion", {})
    return fusion_features(fm["visual_ckpt"], fm["audio_ckpt"], data_dir, split, fm.get("shuffle_audio_seed"))


def run_fusion(visual_ckpt, audio_ckpt, cfg: ExperimentConfig, resume=None, shuffle_audio_seed=None) -> TrainResult:
    """Train the SMLP on frozen unimodal embeddings of the dataset in ``cfg.data_dir``."""
    if visual_ckpt is None or audio_ckpt is None:
        raise ConfigError("fusion needs both a visual and an audio checkpoint")
    if cfg.modality != "fusion":
        cfg = replace(cfg, modality="fusion", ablation=None, model={})
    with thread_limit():
        x, y = fusion_features(visual_ckpt, audio_ckpt, cfg.data_dir, "train", shuffle_audio_seed)
        xt, yt = fusion_features(visual_ckpt, audio_ckpt, cfg.data_dir, "test", shuffle_audio_seed)
        vdim = _unimodal(visual_ckpt, "visual")[0].feature_dim
        model_over = dict(cfg.model, visual_dim=vdim, audio_dim=x.shape[1] - vdim)
        model_over.setdefault("num_classes", int(max(y.max(), yt.max()) + 1))
        cfg = replace(cfg, model=model_over, visual_ckpt=str(visual_ckpt), audio_ckpt=str(audio_ckpt))
        model = build_model("fusion", cfg.model_config(), cfg.seed)
        extra = {"fusion": {"visual_ckpt": str(visual_ckpt), "audio_ckpt": str(audio_ckpt),
                            "shuffle_audio_seed": shuffle_audio_seed}}
        extra.update(_data_meta(cfg, y, yt))
        return fit(model, cfg, x, y, xt, yt, resume, extra)

