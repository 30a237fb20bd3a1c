"""Dense float64 tensors with a reverse-mode tape.

Leaves are created with ``Tensor(values, requires_grad=True)``. Every op whose
inputs touch a requires-grad leaf (directly or through earlier ops) appends a
node to a :class:`Tape`; ``backward(loss)`` walks that tape once in reverse.
Ops on constant inputs return constants and record nothing.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

NORM_EPS = 1e-12


class TapeError(RuntimeError):
    """Tape misuse, e.g. reusing a consumed tape."""


class DegenerateInputError(ValueError):
    """Input violates a numerical precondition (e.g. a zero-norm row)."""


class Tape:
    def __init__(self):
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def __len__(self):
        return len(self.nodes)

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward_fn: Callable) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward(); build a new graph")
        out.tape = self
        out.tape_id = len(self.nodes)
        self.nodes.append((out, inputs, backward_fn))

    def absorb(self, other: Tape) -> None:
        """Append another tape's nodes; both orders were topological, so the union is."""
        if self.consumed or other.consumed:
            raise TapeError("cannot merge a consumed tape")
        for out, inputs, fn in other.nodes:
            out.tape = self
            out.tape_id = len(self.nodes)
            self.nodes.append((out, inputs, fn))
        other.nodes = []
        other.consumed = True

    def leaves(self) -> list[Tensor]:
        seen: dict[int, Tensor] = {}
        for _, inputs, _ in self.nodes:
            for t in inputs:
                if t.tape is None and t.requires_grad:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def reset(self) -> None:
        """Allow one more backward pass over the recorded graph."""
        self.consumed = False


class Tensor:
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        arr.flags.writeable = False
        self.values = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape: Tape | None = None
        self.tape_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> Tensor:
        return Tensor(self.values)

    @property
    def tracked(self) -> bool:
        return self.tape is not None or self.requires_grad

    def __repr__(self):
        return f"Tensor(shape={self.shape}, values={self.values!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, _lift(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _lift(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if not np.isscalar(other):
            raise TypeError("only scalar division is supported")
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(values: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(values)
    tapes = list({id(t.tape): t.tape for t in inputs if t.tape is not None}.values())
    if tapes:
        # independent sub-graphs (e.g. two losses sharing a leaf) join here
        tape = tapes[0]
        for other in tapes[1:]:
            tape.absorb(other)
    elif any(t.requires_grad for t in inputs):
        tape = Tape()
    else:
        return out
    tape.record(out, tuple(inputs), backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(loss: Tensor, leaves: Sequence[Tensor] = ()) -> None:
    """Populate ``.grad`` on every requires-grad leaf reachable through the tape.

    Leaves recorded on the tape but not on a path to ``loss`` receive zeros, as
    do any extra ``leaves`` passed explicitly.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    for leaf in leaves:
        if leaf.requires_grad:
            leaf.grad = np.zeros_like(leaf.values)
    tape = loss.tape
    if tape is None:
        return
    if tape.consumed:
        raise TapeError("backward() already ran on this tape; call tape.reset() first")
    tape.consumed = True
    for leaf in tape.leaves():
        leaf.grad = np.zeros_like(leaf.values)

    grads: dict[int, np.ndarray] = {loss.tape_id: np.ones_like(loss.values)}
    for idx in range(loss.tape_id, -1, -1):
        g = grads.pop(idx, None)
        if g is None:
            continue
        _, inputs, fn = tape.nodes[idx]
        for inp, gi in zip(inputs, fn(g)):
            if gi is None:
                continue
            if inp.tape is tape:
                prev = grads.get(inp.tape_id)
                grads[inp.tape_id] = gi if prev is None else prev + gi
            elif inp.requires_grad:
                inp.grad = inp.grad + gi


# --- elementwise / shape ops -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make(a.values + b.values, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return _make(-a.values, (a,), lambda g: (-g,))


def scale(a: Tensor, k: float) -> Tensor:
    return _make(a.values * k, (a,), lambda g: (g * k,))


def mul(a: Tensor, b: Tensor) -> Tensor:
    av, bv = a.values, b.values
    return _make(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def transpose(a: Tensor) -> Tensor:
    if a.values.ndim != 2:
        raise ValueError("transpose expects a matrix")
    return _make(a.values.T.copy(), (a,), lambda g: (g.T,))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(a.values.sum(axis=axis, keepdims=keepdims), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _make(np.where(mask, a.values, 0.0), (a,), lambda g: (g * mask,))


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant (no gradient there)."""
    mask = np.asarray(mask, dtype=bool)
    return _make(np.where(mask, value, a.values), (a,), lambda g: (np.where(mask, 0.0, g),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ValueError("matmul expects two matrices")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    av, bv = a.values, b.values
    return _make(av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def pairwise_sq_dist(a: Tensor, b: Tensor) -> Tensor:
    """D[i, j] = ||a_i - b_j||^2, formed from differences so equal rows give exactly 0."""
    if a.values.ndim != 2 or b.values.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError(f"pairwise distance needs matching row widths: {a.shape} vs {b.shape}")
    av, bv = a.values, b.values
    diff = av[:, None, :] - bv[None, :, :]

    def bw(g):
        ga = 2.0 * (g.sum(axis=1, keepdims=True) * av - g @ bv)
        gb = 2.0 * (g.sum(axis=0)[:, None] * bv - g.T @ av)
        return ga, gb

    return _make(np.sum(diff * diff, axis=2), (a, b), bw)


# --- row-wise probability ops ------------------------------------------------


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _log_softmax_values(x: np.ndarray) -> np.ndarray:
    m = np.max(x, axis=1, keepdims=True)
    z = x - m
    return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))


def softmax_rows(x: Tensor, tau: float = 1.0) -> Tensor:
    _check_tau(tau)
    z = x.values / tau
    e = np.exp(z - np.max(z, axis=1, keepdims=True))
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return ((p * (g - np.sum(g * p, axis=1, keepdims=True))) / tau,)

    return _make(p, (x,), bw)


def log_softmax_rows(x: Tensor, tau: float = 1.0) -> Tensor:
    _check_tau(tau)
    ls = _log_softmax_values(x.values / tau)
    p = np.exp(ls)

    def bw(g):
        return ((g - p * np.sum(g, axis=1, keepdims=True)) / tau,)

    return _make(ls, (x,), bw)


def l2_normalize_rows(x: Tensor) -> Tensor:
    v = x.values
    norms = np.sqrt(np.sum(v * v, axis=1, keepdims=True))
    if np.any(norms <= NORM_EPS):
        bad = int(np.argmax(norms.reshape(-1) <= NORM_EPS))
        raise DegenerateInputError(f"row {bad} has norm <= {NORM_EPS}; cannot normalize")
    u = v / norms

    def bw(g):
        return ((g - u * np.sum(g * u, axis=1, keepdims=True)) / norms,)

    return _make(u, (x,), bw)


def cross_entropy_rows(logits: Tensor, targets) -> Tensor:
    """Per-row ``-log softmax(logits)[target]``; ``-inf`` logits act as masked."""
    x = logits.values
    if x.ndim != 2:
        raise ValueError("logits must be a matrix")
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    r, c = x.shape
    if t.shape[0] != r:
        raise ValueError(f"expected {r} targets, got {t.shape[0]}")
    if np.any(t < 0) or np.any(t >= c):
        raise IndexError(f"target index out of range for {c} classes")
    ls = _log_softmax_values(x)
    rows = np.arange(r)
    p = np.exp(ls)

    def bw(g):
        d = p.copy()
        d[rows, t] -= 1.0
        return (d * g[:, None],)

    return _make(-ls[rows, t], (logits,), bw)


def cross_entropy_from_logits(logits: Tensor, targets) -> Tensor:
    return tmean(cross_entropy_rows(logits, targets))
