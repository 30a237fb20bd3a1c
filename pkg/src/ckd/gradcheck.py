"""Central finite differences, used as the independent oracle for autodiff."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numerical_grad(fn: Callable[[Sequence[np.ndarray]], float], arrays: Sequence[np.ndarray],
                   h: float = 1e-5) -> list[np.ndarray]:
    """d fn / d arrays[k] by central differences; ``fn`` maps plain arrays to a float."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            fp = fn(arrays)
            a[idx] = orig - h
            fm = fn(arrays)
            a[idx] = orig
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(build: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    loss = build(leaves)
    backward(loss, leaves)
    return [leaf.grad for leaf in leaves]


def max_relative_error(build: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                       h: float = 1e-5) -> float:
    """max |analytic - numeric| / max(1, |numeric|) over every entry."""
    analytic = analytic_grad(build, arrays)
    numeric = numerical_grad(lambda xs: build([Tensor(x) for x in xs]).item(), arrays, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        worst = max(worst, float(np.max(np.abs(a - n) / np.maximum(1.0, np.abs(n)))))
    return worst
