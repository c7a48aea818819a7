"""The three network architectures, assembled as :class:`ModelGraph` objects.

* visual: L2-ActSpikeNet, a ResNet-18-shaped stack of ActAfterAddition blocks
* audio: three conv→BN→LIF→maxpool blocks over a log-mel image
* fusion: the SMLP, a spiking MLP over concatenated unimodal embeddings

Static inputs are injected as direct current at every time step.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import NamedTuple

import numpy as np

from spikedisc import tensor as tt
from spikedisc.errors import ConfigError, ContractError, DimensionError
from spikedisc.layers import (
    BLOCK_VARIANTS,
    LIF,
    ActAfterAdditionBlock,
    AdaptiveAvgPool,
    BatchNorm,
    Conv2d,
    Dropout,
    Flatten,
    L2NormHead,
    Layer,
    Linear,
    MaxPool2d,
    RunContext,
    Sequential,
    VanillaHead,
    run_output_lif,
)
from spikedisc.neurons import LIFConfig, SurrogateSpec
from spikedisc.tensor import Tensor

HEADS = ("l2norm", "vanilla")


def _lif_from(value):
    if isinstance(value, LIFConfig):
        return value
    return LIFConfig.from_dict(value or {})


class _ConfigMixin:
    def to_dict(self):
        d = asdict(self)
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                d[f.name] = list(v)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown {cls.__name__} field(s): {sorted(unknown)}")
        kw = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            v = d[f.name]
            if f.name == "neuron":
                v = _lif_from(v)
            elif isinstance(v, list):
                v = tuple(v)
            kw[f.name] = v
        return cls(**kw)


@dataclass(frozen=True)
class VisualModelConfig(_ConfigMixin):
    """ResNet-18 layout: stem, then 4 stages of ActAfterAddition blocks."""

    in_channels: int = 3
    image_size: int = 32
    stem_width: int = 64
    widths: tuple = (64, 128, 256, 512)
    depths: tuple = (2, 2, 2, 2)
    num_classes: int = 10
    variant: str = "baseline"
    head: str = "l2norm"
    head_scale: float | None = None
    neuron: LIFConfig = field(default_factory=LIFConfig)

    @classmethod
    def paper(cls, **kw):
        return cls(**kw)

    @classmethod
    def desk(cls, **kw):
        base = dict(image_size=8, stem_width=8, widths=(16, 32), depths=(1, 1), num_classes=4)
        base.update(kw)
        return cls(**base)

    @property
    def feature_dim(self):
        return self.widths[-1]


@dataclass(frozen=True)
class AudioModelConfig(_ConfigMixin):
    """Conv→BN→LIF→MaxPool blocks over a 1×mels×frames log-mel input.

    The paper-scale defaults (channels 16/32/64, 3×3 convs, 2×2 pooling on
    64 mels × 427 frames) flatten to 64·8·53 = 27136 features.
    """

    n_mels: int = 64
    frames: int = 427
    channels: tuple = (16, 32, 64)
    kernel: int = 3
    pool: int = 2
    with_dropout: bool = True
    with_third_block: bool = True
    with_pooling: bool = True
    dropout_p: float = 0.5
    num_classes: int = 10
    head: str = "l2norm"
    head_scale: float | None = None
    neuron: LIFConfig = field(default_factory=lambda: LIFConfig(surrogate=SurrogateSpec("fast_sigmoid", k=5.0)))

    @classmethod
    def paper(cls, **kw):
        return cls(**kw)

    @classmethod
    def desk(cls, **kw):
        base = dict(frames=28, channels=(4, 8, 8), num_classes=4)
        base.update(kw)
        return cls(**base)

    @property
    def n_blocks(self):
        return len(self.channels) if self.with_third_block else len(self.channels) - 1

    def output_shape(self):
        h, w = self.n_mels, self.frames
        for _ in range(self.n_blocks):
            if self.with_pooling:
                h, w = h // self.pool, w // self.pool
        return self.channels[self.n_blocks - 1], h, w

    @property
    def feature_dim(self):
        c, h, w = self.output_shape()
        return c * h * w


@dataclass(frozen=True)
class FusionConfig(_ConfigMixin):
    """SMLP over concatenated visual and audio embeddings."""

    visual_dim: int = 512
    audio_dim: int = 27136
    hidden: tuple = (256, 64)
    num_classes: int = 10
    head: str = "vanilla"
    head_scale: float | None = None
    neuron: LIFConfig = field(default_factory=LIFConfig)

    @property
    def input_dim(self):
        return self.visual_dim + self.audio_dim

    @classmethod
    def desk(cls, **kw):
        base = dict(visual_dim=32, audio_dim=192, num_classes=4)
        base.update(kw)
        return cls(**base)


MODEL_CONFIGS = {"visual": VisualModelConfig, "audio": AudioModelConfig, "fusion": FusionConfig}


class ForwardResult(NamedTuple):
    counts: Tensor  # B×C output spike counts
    embeddings: Tensor  # T×B×d pre-head features z_t
    out_spikes: Tensor  # T×B×C


STATEFUL_KINDS = ("lif", "dropout", "block")


class ModelGraph(Layer):
    """Layer stack, classifier head and output LIF, run over T time steps.

    The leading stateless layers (conv, BN, linear, ...) see the same static
    input at every step, so they form a ``stem`` evaluated once per forward
    call; the remaining ``body`` is stepped T times. In training mode this
    means a BN layer inside the stem updates its running statistics once per
    call rather than T times.
    """

    kind = "model"

    def __init__(self, modality, config, layers, head: Layer, out_lif: LIFConfig, head_scale=None):
        self.modality = modality
        self.config = config
        split = next((i for i, l in enumerate(layers) if l.kind in STATEFUL_KINDS), len(layers))
        self.stem = Sequential(layers[:split], "stem")
        self.body = Sequential(layers[split:], "body")
        self.head = head
        self.out_lif = out_lif
        self.head_scale = out_lif.v_th if head_scale is None else head_scale
        self.training = False

    def describe(self):
        return f"{self.modality}_model"

    def listing(self, indent=0):
        lines = super().listing(indent)
        lines.append("  " * (indent + 1) + f"lif_out(C={self.head.num_classes}, gain={self.head_scale})")
        return lines

    def train(self, mode=True):
        self.training = mode
        return self

    def eval(self):
        return self.train(False)

    @property
    def feature_dim(self):
        return self.head.d

    def parameter_count(self):
        return int(sum(p.size for p in self.named_parameters().values()))

    def forward_multistep(self, batch, T: int, rng: np.random.Generator | None = None) -> ForwardResult:
        """Run T steps from zero state. Returns counts, per-step features and output spikes."""
        if T < 1:
            raise ContractError("T must be >= 1")
        x = tt.as_tensor(batch)
        ctx = RunContext(self.training, rng)
        try:
            current = self.stem.step(x, ctx)
        except DimensionError as exc:
            raise DimensionError(f"{self.modality} input {x.shape} incompatible with graph: {exc}") from None
        feats = [self.body.step(current, ctx) for _ in range(T)]
        Z = tt.stack(feats, axis=0)
        if isinstance(self.head, L2NormHead):
            z_av = tt.mean(Z, axis=0)
            silent = np.linalg.norm(z_av.data, axis=1) == 0.0
            if silent.any() and not self.training:
                # eval only: an all-silent sample gets zero logits instead of aborting
                z_av = tt.add(z_av, silent[:, None].astype(np.float64))
                logits = tt.mul(self.head.logits(z_av), (~silent)[:, None].astype(np.float64))
            else:
                logits = self.head.logits(z_av)
            currents = [tt.mul(logits, self.head_scale)] * T
        else:
            currents = [tt.mul(self.head.logits(z), self.head_scale) for z in feats]
        counts, spikes = run_output_lif(currents, self.out_lif)
        return ForwardResult(counts, Z, spikes)

    def embeddings(self, batch, T: int) -> np.ndarray:
        """L2-normalized time-averaged features (the vectors handed to fusion)."""
        res = self.forward_multistep(batch, T)
        z_av = res.embeddings.data.mean(axis=0)
        return z_av / np.linalg.norm(z_av, axis=1, keepdims=True)

    def state_arrays(self):
        out = {f"param/{k}": v.data for k, v in self.named_parameters().items()}
        out.update({f"buffer/{k}": v for k, v in self.named_buffers().items()})
        return out

    def load_state_arrays(self, arrays):
        params, buffers = self.named_parameters(), self.named_buffers()
        expected = {f"param/{k}" for k in params} | {f"buffer/{k}" for k in buffers}
        missing = expected - set(arrays)
        if missing:
            raise ConfigError(f"checkpoint lacks {len(missing)} tensor(s), e.g. {sorted(missing)[:3]}")
        for k, p in params.items():
            a = arrays[f"param/{k}"]
            if a.shape != p.data.shape:
                raise ConfigError(f"shape mismatch for {k}: {a.shape} vs {p.data.shape}")
            p.data = np.array(a, dtype=np.float64)
        for k, b in buffers.items():
            b[...] = arrays[f"buffer/{k}"]


def _make_head(kind, d, num_classes, rng):
    if kind == "l2norm":
        return L2NormHead(d, num_classes, rng=rng)
    if kind == "vanilla":
        return VanillaHead(d, num_classes, rng=rng)
    raise ConfigError(f"unknown head {kind!r}; expected one of {HEADS}")


def build_visual(cfg: VisualModelConfig, seed: int = 0) -> ModelGraph:
    if len(cfg.widths) != len(cfg.depths) or not cfg.widths:
        raise ConfigError("widths and depths must be non-empty and of equal length")
    if min(cfg.widths) <= 0 or min(cfg.depths) <= 0 or cfg.stem_width <= 0:
        raise ConfigError("stage widths/depths must be positive")
    if cfg.variant not in BLOCK_VARIANTS:
        raise ConfigError(f"unknown block variant {cfg.variant!r}")
    rng = np.random.default_rng(seed)
    lif = cfg.neuron
    layers: list[Layer] = [Conv2d(cfg.in_channels, cfg.stem_width, 3, 1, rng=rng)]
    if cfg.variant == "lif_after_bn":
        layers += [BatchNorm(cfg.stem_width), LIF(lif)]
    else:
        layers += [LIF(lif), BatchNorm(cfg.stem_width)]
    in_ch = cfg.stem_width
    size = cfg.image_size
    for i, (width, depth) in enumerate(zip(cfg.widths, cfg.depths)):
        for j in range(depth):
            stride = 2 if (i > 0 and j == 0) else 1
            if stride == 2:
                size = (size - 1) // 2 + 1
            layers.append(ActAfterAdditionBlock(in_ch, width, stride, lif, lif, cfg.variant, rng=rng))
            in_ch = width
    if size < 1:
        raise ConfigError("image too small for the number of stages")
    layers += [AdaptiveAvgPool(), Flatten()]
    head = _make_head(cfg.head, cfg.feature_dim, cfg.num_classes, rng)
    return ModelGraph("visual", cfg, layers, head, lif, cfg.head_scale)


def build_audio(cfg: AudioModelConfig, seed: int = 0) -> ModelGraph:
    if len(cfg.channels) < 2:
        raise ConfigError("audio model needs at least two conv blocks")
    if cfg.feature_dim <= 0:
        raise ConfigError(f"audio toggles leave no features (output shape {cfg.output_shape()})")
    rng = np.random.default_rng(seed)
    lif = cfg.neuron
    chans = cfg.channels[: cfg.n_blocks]
    layers: list[Layer] = []
    in_ch = 1
    for ch in chans:
        layers += [Conv2d(in_ch, ch, cfg.kernel, 1, rng=rng), BatchNorm(ch), LIF(lif)]
        if cfg.with_pooling:
            layers.append(MaxPool2d(cfg.pool))
        in_ch = ch
    layers.append(Flatten())
    if cfg.with_dropout:
        layers.append(Dropout(cfg.dropout_p))
    head = _make_head(cfg.head, cfg.feature_dim, cfg.num_classes, rng)
    return ModelGraph("audio", cfg, layers, head, lif, cfg.head_scale)


def build_mlp(in_dim: int, hidden, num_classes: int, head: str = "l2norm", neuron: LIFConfig | None = None,
              input_bn: bool = False, head_scale=None, seed: int = 0, modality: str = "mlp",
              hidden_bn: bool = True) -> ModelGraph:
    """Spiking MLP: [BN] then (Linear -> [BN] -> LIF) per hidden width, then a head."""
    if in_dim <= 0 or not hidden or min(hidden) <= 0:
        raise ConfigError("input dim and hidden widths must be positive")
    rng = np.random.default_rng(seed)
    lif = neuron if neuron is not None else LIFConfig()
    layers: list[Layer] = [BatchNorm(in_dim)] if input_bn else []
    width = in_dim
    for h in hidden:
        layers += [Linear(width, h, rng=rng), *([BatchNorm(h)] if hidden_bn else []), LIF(lif)]
        width = h
    return ModelGraph(modality, None, layers, _make_head(head, width, num_classes, rng), lif, head_scale)


def build_smlp(cfg: FusionConfig, seed: int = 0) -> ModelGraph:
    if cfg.visual_dim <= 0 or cfg.audio_dim <= 0:
        raise ConfigError("fusion dims must be positive")
    g = build_mlp(cfg.input_dim, cfg.hidden, cfg.num_classes, cfg.head, cfg.neuron, True, cfg.head_scale, seed, "fusion")
    g.config = cfg
    return g


BUILDERS = {"visual": build_visual, "audio": build_audio, "fusion": build_smlp}


def build_model(modality: str, cfg, seed: int = 0) -> ModelGraph:
    try:
        return BUILDERS[modality](cfg, seed)
    except KeyError:
        raise ConfigError(f"unknown modality {modality!r}") from None
