"""Central finite-difference gradient checking."""

from __future__ import annotations

import numpy as np

from spikedisc.tensor import Tape, Tensor


def numeric_grad(fn, arrays, index: int, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``.

    ``fn`` receives plain Tensors built from copies of ``arrays`` and must
    return a scalar Tensor. No tape is active during the evaluations.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = target[i]
        target[i] = orig + h
        fp = fn(*[Tensor(a) for a in base]).item()
        target[i] = orig - h
        fm = fn(*[Tensor(a) for a in base]).item()
        target[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def analytic_grads(fn, arrays, wrt=None) -> list[np.ndarray]:
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=i in wrt) for i, a in enumerate(arrays)]
    with Tape() as tape:
        loss = fn(*tensors)
    tape.backward(loss)
    out = []
    for i in wrt:
        g = tensors[i].grad
        out.append(np.zeros_like(tensors[i].data) if g is None else g)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise relative error ``|a - n| / max(|a|, |n|)`` (0 when both vanish)."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def gradcheck(fn, arrays, wrt=None, h: float = 1e-5) -> float:
    """Largest relative error between tape gradients and central differences."""
    wrt = list(range(len(arrays))) if wrt is None else list(wrt)
    analytic = analytic_grads(fn, arrays, wrt)
    worst = 0.0
    for i, g in zip(wrt, analytic):
        worst = max(worst, relative_error(g, numeric_grad(fn, arrays, i, h)))
    return worst
