"""Central finite-difference gradient checking."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor


def numeric_grad(fn: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = fn().item()
        flat[i] = orig - h
        fm = fn().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def relative_error(a: np.ndarray, b: np.ndarray, atol: float = 1e-8) -> float:
    """max |a-b| / max(|a|, |b|, atol) over entries."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), atol)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
              atol: float = 1e-7) -> float:
    """Largest relative error between tape gradients and central differences.

    ``fn`` must rebuild the scalar from ``params`` on every call.
    """
    analytic = analytic_grads(fn, params)
    worst = 0.0
    for p, ga in zip(params, analytic):
        gn = numeric_grad(fn, p, h)
        worst = max(worst, relative_error(ga, gn, atol))
    return worst
