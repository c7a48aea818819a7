"""Spiking layers: conv/BN/LIF building blocks, the ActAfterAddition residual
block, and the L2-normalized classification head.

Layers are stepped one time step at a time. Everything that changes
during a forward pass (membrane potentials, the dropout RNG, the
train/eval flag) lives in a :class:`RunContext` that the caller creates
per forward call, so layers themselves only own parameters and BN
running statistics.
"""

from __future__ import annotations

import math

import numpy as np

from spikedisc import tensor as tt
from spikedisc.errors import ConfigError, ContractError, DimensionError, NumericFault
from spikedisc.neurons import LIFConfig, LIFState, lif_step
from spikedisc.tensor import Tensor

BLOCK_VARIANTS = ("baseline", "lif_after_bn", "lif_before_add")


class RunContext:
    """Per-forward mutable state: LIF potentials, mode flag and RNG."""

    def __init__(self, training: bool = False, rng: np.random.Generator | None = None):
        self.training = training
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.states: dict[int, LIFState] = {}


class Layer:
    kind = "layer"

    def step(self, x: Tensor, ctx: RunContext) -> Tensor:
        raise NotImplementedError

    def describe(self) -> str:
        return self.kind

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Layer):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Layer):
                        yield f"{name}.{i}", item

    def own_parameters(self):
        return {}

    def own_buffers(self):
        return {}

    def named_parameters(self, prefix=""):
        out = {prefix + k: v for k, v in self.own_parameters().items()}
        for name, child in self.children():
            out.update(child.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix=""):
        out = {prefix + k: v for k, v in self.own_buffers().items()}
        for name, child in self.children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    def listing(self, indent=0) -> list[str]:
        """Human-readable layer listing, one line per leaf layer."""
        kids = list(self.children())
        if not kids:
            return ["  " * indent + self.describe()]
        lines = ["  " * indent + self.describe()]
        for _, child in kids:
            lines.extend(child.listing(indent + 1))
        return lines

    def __call__(self, x, ctx):
        return self.step(x, ctx)


def kaiming_normal(rng, shape, fan_in):
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


class Conv2d(Layer):
    kind = "conv"

    def __init__(self, in_ch, out_ch, kernel=3, stride=1, padding=None, bias=False, rng=None):
        if min(in_ch, out_ch, kernel, stride) <= 0:
            raise ConfigError("conv sizes must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_ch, self.out_ch, self.kernel, self.stride = in_ch, out_ch, kernel, stride
        self.padding = kernel // 2 if padding is None else padding
        fan_in = in_ch * kernel * kernel
        self.weight = Tensor(kaiming_normal(rng, (out_ch, in_ch, kernel, kernel), fan_in), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch), requires_grad=True) if bias else None

    def own_parameters(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def step(self, x, ctx):
        return tt.conv2d(x, self.weight, self.bias, self.stride, self.padding)

    def describe(self):
        return f"conv{self.kernel}x{self.kernel}({self.in_ch}->{self.out_ch}, stride={self.stride})"


class BatchNorm(Layer):
    """Batch norm over channel axis 1 (works for B×C and B×C×H×W)."""

    kind = "bn"

    def __init__(self, channels, momentum=0.1, eps=1e-5):
        self.channels, self.momentum, self.eps = channels, momentum, eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def own_parameters(self):
        return {"gamma": self.gamma, "beta": self.beta}

    def own_buffers(self):
        return {"running_mean": self.running_mean, "running_var": self.running_var}

    def step(self, x, ctx):
        return tt.batchnorm(
            x, self.gamma, self.beta, self.running_mean, self.running_var, ctx.training, self.momentum, self.eps
        )

    def describe(self):
        return f"bn({self.channels})"


class Linear(Layer):
    kind = "linear"

    def __init__(self, in_features, out_features, bias=True, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features, self.out_features = in_features, out_features
        self.weight = Tensor(kaiming_normal(rng, (out_features, in_features), in_features), requires_grad=True)
        self.bias = Tensor(np.zeros(out_features), requires_grad=True) if bias else None

    def own_parameters(self):
        p = {"weight": self.weight}
        if self.bias is not None:
            p["bias"] = self.bias
        return p

    def step(self, x, ctx):
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"linear expects {self.in_features} features, got {x.shape[-1]}")
        return tt.linear(x, self.weight, self.bias)

    def describe(self):
        return f"linear({self.in_features}->{self.out_features})"


class LIF(Layer):
    kind = "lif"

    def __init__(self, cfg: LIFConfig | None = None):
        self.cfg = cfg or LIFConfig()

    def step(self, x, ctx):
        state = ctx.states.get(id(self))
        if state is None:
            state = LIFState()
        s, state = lif_step(state, x, self.cfg)
        ctx.states[id(self)] = state
        return s

    def describe(self):
        return f"lif(beta={self.cfg.beta}, v_th={self.cfg.v_th}, reset={self.cfg.reset})"


class MaxPool2d(Layer):
    kind = "maxpool"

    def __init__(self, kernel=2):
        self.kernel = kernel

    def step(self, x, ctx):
        return tt.maxpool2d(x, self.kernel)

    def describe(self):
        return f"maxpool{self.kernel}x{self.kernel}"


class AdaptiveAvgPool(Layer):
    kind = "avgpool"

    def step(self, x, ctx):
        return tt.adaptive_avgpool2d(x)

    def describe(self):
        return "avgpool(1x1)"


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p=0.5):
        if not 0.0 <= p < 1.0:
            raise ContractError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p

    def step(self, x, ctx):
        return tt.dropout(x, self.p, ctx.training, ctx.rng)

    def describe(self):
        return f"dropout(p={self.p})"


class Flatten(Layer):
    kind = "flatten"

    def step(self, x, ctx):
        return tt.flatten(x)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers, name="sequential"):
        self.layers = list(layers)
        self.name = name

    def step(self, x, ctx):
        for i, layer in enumerate(self.layers):
            x = layer.step(x, ctx)
            if not np.isfinite(x.data).all():
                raise NumericFault(f"non-finite activation in {self.name} layer {i} ({layer.describe()})")
        return x

    def describe(self):
        return self.name


class ActAfterAdditionBlock(Layer):
    """Spiking residual block with the output LIF applied after the skip addition.

    baseline:        conv1 -> LIF -> BN1 -> conv2 -> BN2, + skip, -> LIF_out
    lif_after_bn:    conv1 -> BN1 -> LIF -> conv2 -> BN2, + skip, -> LIF_out
    lif_before_add:  baseline branch -> LIF, + skip, -> LIF_out

    The skip path is the identity, or a 1×1 conv + BN projection when the
    stride or channel count changes.
    """

    kind = "block"

    def __init__(
        self,
        in_ch,
        out_ch,
        stride=1,
        lif_inner: LIFConfig | None = None,
        lif_out: LIFConfig | None = None,
        variant="baseline",
        rng=None,
    ):
        if variant not in BLOCK_VARIANTS:
            raise ConfigError(f"unknown block variant {variant!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        lif_inner = lif_inner or LIFConfig()
        lif_out = lif_out or lif_inner
        self.variant = variant
        self.in_ch, self.out_ch, self.stride = in_ch, out_ch, stride
        conv1 = Conv2d(in_ch, out_ch, 3, stride, rng=rng)
        conv2 = Conv2d(out_ch, out_ch, 3, 1, rng=rng)
        if variant == "lif_after_bn":
            branch = [conv1, BatchNorm(out_ch), LIF(lif_inner), conv2, BatchNorm(out_ch)]
        else:
            branch = [conv1, LIF(lif_inner), BatchNorm(out_ch), conv2, BatchNorm(out_ch)]
        if variant == "lif_before_add":
            branch.append(LIF(lif_inner))
        self.branch = Sequential(branch, "branch")
        if stride != 1 or in_ch != out_ch:
            self.downsample = Sequential([Conv2d(in_ch, out_ch, 1, stride, padding=0, rng=rng), BatchNorm(out_ch)], "skip")
        else:
            self.downsample = None
        self.lif_out = LIF(lif_out)

    def step(self, x, ctx):
        branch = self.branch.step(x, ctx)
        skip = x if self.downsample is None else self.downsample.step(x, ctx)
        if branch.shape != skip.shape:
            raise DimensionError(f"branch {branch.shape} and skip {skip.shape} differ")
        return self.lif_out.step(branch + skip, ctx)

    def describe(self):
        return f"ActAfterAddition[{self.variant}]({self.in_ch}->{self.out_ch}, stride={self.stride})"


def block_forward(block: ActAfterAdditionBlock, s_in, ctx: RunContext | None = None) -> Tensor:
    """Run a block over a T×… input sequence from zero membrane state."""
    s_in = tt.as_tensor(s_in)
    ctx = ctx if ctx is not None else RunContext()
    return tt.stack([block.step(s_in[t], ctx) for t in range(s_in.shape[0])], axis=0)


class L2NormHead(Layer):
    """Cosine-similarity classifier head.

    The time-averaged feature ``z_av`` and every column of the d×C weight
    matrix are projected onto the unit sphere; logits are their inner
    products and so lie in [-1, 1].
    """

    kind = "l2head"

    def __init__(self, d, num_classes, rng=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d, self.num_classes = d, num_classes
        self.weight = Tensor(rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, num_classes)), requires_grad=True)

    def own_parameters(self):
        return {"weight": self.weight}

    def embed(self, z_av) -> Tensor:
        z_av = tt.as_tensor(z_av)
        if z_av.shape[-1] != self.d:
            raise DimensionError(f"head expects {self.d}-dim features, got {z_av.shape[-1]}")
        return tt.l2_normalize(z_av, axis=-1)

    def normalized_weight(self) -> Tensor:
        return tt.l2_normalize(tt.transpose(self.weight), axis=-1)

    def logits(self, z_av) -> Tensor:
        return tt.matmul(self.embed(z_av), tt.transpose(self.normalized_weight()))

    def describe(self):
        return f"l2norm_head({self.d}->{self.num_classes})"


class VanillaHead(Layer):
    """Plain affine classifier applied to each time step's features."""

    kind = "fc_head"

    def __init__(self, d, num_classes, rng=None):
        self.d, self.num_classes = d, num_classes
        self.fc = Linear(d, num_classes, bias=True, rng=rng)

    def logits(self, z) -> Tensor:
        return self.fc.step(tt.as_tensor(z), None)

    def describe(self):
        return f"fc_head({self.d}->{self.num_classes})"


def l2_head_forward(head: L2NormHead, features) -> Tensor:
    """Average T×B×d features over time, then take cosine logits (B×C)."""
    features = tt.as_tensor(features)
    if features.ndim != 3 or features.shape[0] < 1:
        raise ContractError("features must be T×B×d with T >= 1")
    return head.logits(tt.mean(features, axis=0))


def run_output_lif(currents, lif: LIFConfig):
    """Feed a sequence of B×C currents to an output LIF layer; return (counts, spikes)."""
    state = LIFState()
    spikes = []
    for cur in currents:
        s, state = lif_step(state, cur, lif)
        spikes.append(s)
    stacked = tt.stack(spikes, axis=0)
    return tt.tsum(stacked, axis=0), stacked


def head_to_spikes(logits, lif: LIFConfig, T: int, scale: float | None = None):
    """Drive output LIF neurons with ``scale * logits`` for T steps; return per-class spike counts."""
    scale = lif.v_th if scale is None else scale
    if not scale > 0:
        raise ContractError(f"head gain must be positive, got {scale}")
    current = tt.mul(tt.as_tensor(logits), scale)
    counts, _ = run_output_lif([current] * T, lif)
    return counts
