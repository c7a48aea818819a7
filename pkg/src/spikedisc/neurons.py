"""Leaky integrate-and-fire neurons and surrogate spike gradients.

Membrane update per step::

    v <- beta * v + i_in
    s  = 1 if v >= v_th else 0
    v <- reset(v, s)

The spike nonlinearity is a hard Heaviside in the forward pass. Its
backward pass uses a surrogate pseudo-derivative evaluated at
``u = v - v_th``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from spikedisc import tensor as tt
from spikedisc.errors import ConfigError, ContractError, DimensionError
from spikedisc.tensor import Tensor

RESET_MODES = ("subtract", "zero", "none")
SURROGATE_KINDS = ("arctan", "fast_sigmoid")


@dataclass(frozen=True)
class SurrogateSpec:
    """Which smooth stand-in to differentiate in place of the Heaviside.

    ``paper_literal`` switches the backward formulas to the printed
    variants: ``(1/pi) / (1 + (pi*u*a/2)^2)`` for arctan and
    ``u / (1 + k|u|)^2`` for fast sigmoid. Neither is the derivative of its
    own smooth forward form, so gradient checks only hold with the default.

    ``relaxed`` makes the forward pass emit the smooth approximation itself
    instead of the Heaviside; used to finite-difference-check training
    pipelines end to end.
    """

    kind: str = "arctan"
    a: float = 2.0
    k: float = 5.0
    paper_literal: bool = False
    relaxed: bool = False

    def __post_init__(self):
        if self.kind not in SURROGATE_KINDS:
            raise ConfigError(f"unknown surrogate kind {self.kind!r}")
        if self.kind == "arctan" and not self.a > 0:
            raise ConfigError("arctan sharpness a must be positive")
        if self.kind == "fast_sigmoid" and not self.k > 0:
            raise ConfigError("fast-sigmoid slope k must be positive")


@dataclass(frozen=True)
class LIFConfig:
    beta: float = 0.9
    v_th: float = 1.0
    reset: str = "subtract"
    surrogate: SurrogateSpec = field(default_factory=SurrogateSpec)
    detach_reset: bool = True

    def __post_init__(self):
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}")
        if not self.v_th > 0:
            raise ConfigError(f"v_th must be positive, got {self.v_th}")
        if self.reset not in RESET_MODES:
            raise ConfigError(f"reset must be one of {RESET_MODES}, got {self.reset!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        sur = d.pop("surrogate", {})
        if not isinstance(sur, SurrogateSpec):
            sur = SurrogateSpec(**sur)
        return cls(surrogate=sur, **d)


@dataclass
class LIFState:
    """Membrane potentials of one layer; ``None`` until the first step."""

    v: Tensor | None = None

    @classmethod
    def zeros(cls, shape):
        return cls(Tensor(np.zeros(shape)))


def surrogate_forward(u, spec: SurrogateSpec):
    """Smooth approximation of the spike whose derivative is the surrogate.

    arctan: ``1/2 + (1/pi) arctan(pi*u*a/2)``; fast sigmoid: ``u / (1 + k|u|)``.
    The arctan form carries a constant 1/2 offset so that it ranges over
    (0, 1) like a spike; the offset does not change the derivative.
    """
    u = np.asarray(u, dtype=np.float64)
    if spec.kind == "arctan":
        return 0.5 + np.arctan(np.pi * u * spec.a / 2.0) / np.pi
    return u / (1.0 + spec.k * np.abs(u))


def surrogate_backward(u, spec: SurrogateSpec):
    """Pseudo-derivative dS/du used in place of the Heaviside's derivative."""
    u = np.asarray(u, dtype=np.float64)
    if spec.kind == "arctan":
        denom = 1.0 + (np.pi * u * spec.a / 2.0) ** 2
        return (1.0 / np.pi) / denom if spec.paper_literal else (spec.a / 2.0) / denom
    denom = (1.0 + spec.k * np.abs(u)) ** 2
    return u / denom if spec.paper_literal else 1.0 / denom


def heaviside(u):
    return (np.asarray(u) >= 0.0).astype(np.float64)


def spike(u, spec: SurrogateSpec) -> Tensor:
    """Differentiable spike of ``u = v - v_th``: Heaviside forward, surrogate backward."""
    u = tt.as_tensor(u)
    out = surrogate_forward(u.data, spec) if spec.relaxed else heaviside(u.data)

    def bw(g):
        return (g * surrogate_backward(u.data, spec),)

    return tt.record((u,), out, bw)


def lif_step(state: LIFState, i_in, cfg: LIFConfig):
    """Advance one time step. Returns ``(spikes, new_state)``."""
    i_in = tt.as_tensor(i_in)
    v = state.v
    if v is None:
        v_new = i_in
    else:
        if v.shape != i_in.shape:
            raise DimensionError(f"input shape {i_in.shape} does not match state {v.shape}")
        v_new = v * cfg.beta + i_in if cfg.beta != 0.0 else i_in
    s = spike(v_new - cfg.v_th, cfg.surrogate)
    if cfg.reset == "none":
        return s, LIFState(v_new)
    r = s.detach() if cfg.detach_reset else s
    if cfg.reset == "subtract":
        v_new = v_new - r * cfg.v_th
    else:
        v_new = v_new * (1.0 - r)
    return s, LIFState(v_new)


def lif_sequence(inputs, cfg: LIFConfig, return_potentials: bool = False):
    """Run a zero-initialised LIF layer over the leading time axis of ``inputs``.

    With ``return_potentials`` the post-reset membrane potential after each
    step is returned as a second T×… array.
    """
    inputs = tt.as_tensor(inputs)
    if inputs.ndim == 0 or inputs.shape[0] == 0:
        raise ContractError("lif_sequence needs at least one time step")
    state = LIFState.zeros(inputs.shape[1:])
    spikes, potentials = [], []
    for t in range(inputs.shape[0]):
        s, state = lif_step(state, inputs[t], cfg)
        spikes.append(s)
        potentials.append(state.v.data)
    out = tt.stack(spikes, axis=0)
    if return_potentials:
        return out, np.stack(potentials)
    return out
