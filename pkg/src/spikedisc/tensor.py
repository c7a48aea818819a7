"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations are recorded on the innermost active :class:`Tape` whenever at
least one operand requires a gradient. Outside a tape every operation runs
as a plain numpy computation, so a forward pass without gradient tracking
produces exactly the same values as one with tracking.

Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = (x @ w).sum()
    tape.backward(loss)
    w.grad
"""

from __future__ import annotations

import threading
from typing import Callable, NamedTuple, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from spikedisc.errors import ContractError, DimensionError

DTYPE = np.float64

_local = threading.local()


def _tape_stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape():
    """Return the innermost active tape of this thread, or None."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Node(NamedTuple):
    inputs: tuple
    output: "Tensor"
    backward: Callable


class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, which is a topological order
    of the computation graph by construction. A tape has a single writer:
    it must only be used from the thread that entered it.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._outputs: set[int] = set()

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, inputs, output, backward):
        self.nodes.append(Node(tuple(inputs), output, backward))
        self._outputs.add(id(output))

    def backward(self, loss: "Tensor") -> None:
        """Replay the tape in reverse and accumulate ``.grad`` on leaf tensors."""
        if loss.data.size != 1:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._outputs:
            raise ContractError("loss was not produced on this tape")
        grads = {id(loss): np.ones_like(loss.data)}
        leaves = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in self._outputs:
                    leaves[key] = inp
        for key, leaf in leaves.items():
            g = grads.get(key)
            if g is None:
                continue
            g = np.asarray(g, dtype=DTYPE).reshape(leaf.data.shape)
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def backward(tape: Tape, loss: "Tensor") -> None:
    """Functional form of :meth:`Tape.backward`."""
    tape.backward(loss)


class Tensor:
    """A dense row-major float64 array that can take part in a tape."""

    __slots__ = ("data", "requires_grad", "grad", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.ascontiguousarray(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self):
        return self.data.shape[0]

    # arithmetic
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(inputs: Sequence[Tensor], out_data, backward_fn) -> Tensor:
    """Wrap ``out_data`` in a Tensor and record it on the active tape.

    ``backward_fn`` maps the output gradient to a tuple with one entry per
    input (``None`` for inputs that need no gradient). This is the hook for
    defining new differentiable operations outside this module.
    """
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(inputs, out, backward_fn)
    return out


def unbroadcast(grad, shape):
    """Sum ``grad`` over the axes that broadcasting expanded to reach it."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return record((a, b), a.data + b.data, bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return record((a, b), a.data - b.data, bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return record((a, b), a.data * b.data, bw)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return record((a, b), a.data / b.data, bw)


def power(a, exponent: float):
    a = as_tensor(a)
    exponent = float(exponent)

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return record((a,), a.data**exponent, bw)


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        return (g * 0.5 / out,)

    return record((a,), out, bw)


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return (g * out,)

    return record((a,), out, bw)


# reductions and shape


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)

    def bw(g):
        return (_expand_reduced(np.asarray(g), a.shape, axis, keepdims).copy(),)

    return record((a,), a.data.sum(axis=axis, keepdims=keepdims), bw)


def mean(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(np.asarray(out).size, 1)

    def bw(g):
        return (_expand_reduced(np.asarray(g) / count, a.shape, axis, keepdims).copy(),)

    return record((a,), out, bw)


def reshape(a, shape):
    a = as_tensor(a)
    if isinstance(shape, int):
        shape = (shape,)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def bw(g):
        return (g.reshape(a.shape),)

    return record((a,), out, bw)


def flatten(a, start_dim: int = 1):
    a = as_tensor(a)
    return reshape(a, a.shape[:start_dim] + (-1,))


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return record((a,), np.transpose(a.data, axes), bw)


def getitem(a, index):
    a = as_tensor(a)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return record((a,), a.data[index], bw)


def concat(tensors, axis: int = -1):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return record(tensors, out, bw)


def stack(tensors, axis: int = 0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None

    def bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return record(tensors, out, bw)


# linear algebra


def matmul(a, b):
    """2-D matrix product with the usual reverse rules dA = dC Bᵀ, dB = Aᵀ dC."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return record((a, b), a.data @ b.data, bw)


def linear(x, weight, bias=None):
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    out = matmul(x, transpose(weight))
    return out if bias is None else add(out, bias)


# convolution and pooling


def _pair(v):
    return (v, v) if np.isscalar(v) else tuple(v)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation over a B×C×H×W batch with an F×C×kh×kw kernel."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape}, {weight.shape}")
    B, C, H, W = x.shape
    F, Cw, kh, kw = weight.shape
    if C != Cw:
        raise DimensionError(f"conv2d channel mismatch: input {C}, kernel {Cw}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    Ho = conv_output_size(H, kh, sh, ph)
    Wo = conv_output_size(W, kw, sw, pw)
    if kh > H + 2 * ph or kw > W + 2 * pw or Ho <= 0 or Wo <= 0:
        raise DimensionError(
            f"conv2d output would be empty: input {H}x{W}, kernel {kh}x{kw}, pad {ph},{pw}"
        )
    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    # (B, Ho, Wo, C, kh, kw) -> rows of receptive fields
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(F, -1)
    out = (cols @ wmat.T).reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2)
    inputs = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, F, 1, 1)
        inputs.append(bias)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, F)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gmat @ wmat).reshape(B, Ho, Wo, C, kh, kw).transpose(4, 5, 0, 3, 1, 2).copy()
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + sh * Ho : sh, j : j + sw * Wo : sw] += dcols[i, j]
            gx = gxp[:, :, ph : ph + H, pw : pw + W]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return record(inputs, np.ascontiguousarray(out), bw)


def maxpool2d(x, kernel=2, stride=None):
    """Max pooling with floor output size; ties route the gradient to the first index in scan order."""
    x = as_tensor(x)
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride if stride is not None else kernel)
    B, C, H, W = x.shape
    if kh > H or kw > W:
        raise DimensionError(f"pool window {kh}x{kw} larger than input {H}x{W}")
    Ho = (H - kh) // sh + 1
    Wo = (W - kw) // sw + 1
    if (sh, sw) == (kh, kw):
        # non-overlapping windows: reshape instead of a strided view
        crop = x.data[:, :, : Ho * kh, : Wo * kw]
        flat = crop.reshape(B, C, Ho, kh, Wo, kw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, kh * kw)
    else:
        win = sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
        flat = win.reshape(B, C, Ho, Wo, kh * kw)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gx = np.zeros_like(x.data)
        if (sh, sw) == (kh, kw):
            onehot = (arg[..., None] == np.arange(kh * kw)) * g[..., None]
            gx[:, :, : Ho * kh, : Wo * kw] = (
                onehot.reshape(B, C, Ho, Wo, kh, kw).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho * kh, Wo * kw)
            )
            return (gx,)
        di, dj = np.divmod(arg, kw)
        rows = np.arange(Ho).reshape(1, 1, Ho, 1) * sh + di
        cols = np.arange(Wo).reshape(1, 1, 1, Wo) * sw + dj
        bi = np.arange(B).reshape(B, 1, 1, 1)
        ci = np.arange(C).reshape(1, C, 1, 1)
        np.add.at(gx, (bi, ci, rows, cols), g)
        return (gx,)

    return record((x,), out, bw)


def adaptive_avgpool2d(x):
    """Average over the spatial dimensions down to a 1×1 map."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"adaptive_avgpool2d expects B×C×H×W, got {x.shape}")
    return mean(x, axis=(2, 3), keepdims=True)


# normalization and regularization


def batchnorm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
):
    """Per-channel batch normalization over axis 1.

    In training mode the batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance, exponential
    moving average with ``momentum``). A zero-variance channel is handled
    by ``eps`` alone, so it maps to ``beta``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise DimensionError(f"batchnorm parameters must have shape ({C},)")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, C) + (1,) * (x.ndim - 2)
    if training:
        n = x.data.size // C
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu.reshape(bshape)) * inv.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gx = None
        if x.requires_grad:
            gxhat = g * gamma.data.reshape(bshape)
            if training:
                m = x.data.size // C
                gx = (inv.reshape(bshape) / m) * (
                    m * gxhat
                    - gxhat.sum(axis=axes, keepdims=True)
                    - xhat * (gxhat * xhat).sum(axis=axes, keepdims=True)
                )
            else:
                gx = gxhat * inv.reshape(bshape)
        return gx, ggamma, gbeta

    return record((x, gamma, beta), out, bw)


def dropout(x, p: float, training: bool, rng: np.random.Generator | None = None):
    """Inverted dropout; identity in eval mode or when ``p == 0``."""
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout probability must be in [0, 1), got {p}")
    x = as_tensor(x)
    if not training or p == 0.0:
        return x
    rng = rng if rng is not None else np.random.default_rng()
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(mask))


def l2_normalize(x, axis: int = -1, min_norm: float = 1e-12):
    """Divide ``x`` by its L2 norm along ``axis``.

    Raises DegenerateEmbeddingError when any norm falls below ``min_norm``
    instead of silently adding an epsilon.
    """
    from spikedisc.errors import DegenerateEmbeddingError

    x = as_tensor(x)
    norm = sqrt(tsum(mul(x, x), axis=axis, keepdims=True))
    small = norm.data < min_norm
    if small.any():
        idx = np.nonzero(small.reshape(-1))[0].tolist()
        raise DegenerateEmbeddingError(
            f"cannot L2-normalize: {len(idx)} vector(s) with norm < {min_norm}", idx
        )
    return div(x, norm)
