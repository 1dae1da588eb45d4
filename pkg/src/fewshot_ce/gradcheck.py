"""Central finite-difference gradient checking against the tape."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import GradientTape, Tensor


def tape_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    tape = GradientTape()
    ts = [tape.watch(a) for a in arrays]
    loss = fn(*ts)
    tape.backward(loss)
    return [tape.grad(t) for t in ts]


def numeric_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> list[np.ndarray]:
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*[Tensor(x) for x in arrays]).item()
            flat[i] = orig - h
            fm = fn(*[Tensor(x) for x in arrays]).item()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def max_relative_error(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-5) -> float:
    """Largest ``|autodiff - fd| / max(1, |fd|)`` over every input coordinate."""
    analytic = tape_gradients(fn, arrays)
    numeric = numeric_gradients(fn, arrays, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n)))))
    return worst
