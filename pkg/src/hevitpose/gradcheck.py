"""Central finite-difference gradient checking.

The oracle evaluates the loss twice per perturbed coordinate and never looks
at the backward rules it is validating.  Run at 64-bit; 32-bit inputs make
the differences meaningless.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(f: Callable[[], Tensor], x: Tensor, step: float = 1e-5) -> np.ndarray:
    """d f() / d x by central differences, perturbing one scalar at a time."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        h = step * max(1.0, abs(orig))
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max absolute difference over the larger gradient magnitude."""
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def check(f: Callable[[], Tensor], wrt: Sequence[Tensor], step: float = 1e-5) -> float:
    """Worst relative error between autodiff and finite differences.

    `f` rebuilds the scalar loss from scratch on every call; `wrt` lists the
    tensors whose gradients are compared.
    """
    for t in wrt:
        t.zero_grad()
    backward(f())
    worst = 0.0
    for t in wrt:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        numeric = numeric_grad(f, t, step=step)
        worst = max(worst, relative_error(analytic, numeric))
    return worst
