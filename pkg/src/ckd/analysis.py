"""Gradient-factor analysis, rank bound and triple counting for the CKD loss.

``g_factor`` is the softmax residual ``1 - p(positive)`` that scales the
gradient of the per-sample contrastive loss. The helpers here evaluate it, its
equal-gap approximation, and its limits in temperature and batch size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .losses import LogitBatch


@dataclass
class GradientFactorInput:
    pos_sim: float
    neg_sims: Sequence[float] = field(default_factory=list)
    tau: float = 1.0

    def __post_init__(self):
        _check_tau(self.tau)
        self.neg_sims = [float(v) for v in self.neg_sims]
        if not all(math.isfinite(v) for v in [self.pos_sim, *self.neg_sims]):
            raise ValueError("similarities must be finite")

    @property
    def gaps(self) -> list[float]:
        return [self.pos_sim - n for n in self.neg_sims]


@dataclass
class TripleCountQuery:
    n: int
    m: int
    c: int
    K: int = 0

    def __post_init__(self):
        # c == 1 (n == m) is allowed so the single-class degenerate case is countable
        if self.c < 1 or self.m < 1:
            raise ValueError(f"invalid counts n={self.n}, m={self.m}, c={self.c}")
        if self.n != self.m * self.c:
            raise ValueError(f"unbalanced data: n={self.n} != m*c={self.m * self.c}")


_BELOW_ONE = math.nextafter(1.0, 0.0)


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")


def g_factor(inp: GradientFactorInput) -> float:
    """1 - e^{pos/tau} / (e^{pos/tau} + sum_j e^{neg_j/tau}), stabilised."""
    _check_tau(inp.tau)
    if not inp.neg_sims:
        return 0.0
    # 1 - p_pos = sum_j e^{-gap_j/tau} / (1 + sum_j e^{-gap_j/tau}); evaluate in log space
    z = np.array([-g / inp.tau for g in inp.gaps])
    m = max(0.0, float(z.max()))
    num = float(np.sum(np.exp(z - m)))
    # the exact value is below 1; keep it there when 1 - g underflows the ulp
    return min(num / (math.exp(-m) + num), _BELOW_ONE)


def negative_share(inp: GradientFactorInput, k: int) -> float:
    """Softmax mass of negative ``k`` in the full denominator (positive included)."""
    z = np.array([0.0] + [-g / inp.tau for g in inp.gaps])
    e = np.exp(z - z.max())
    return float(e[k + 1] / e.sum())


def log_one_minus_g(inp: GradientFactorInput) -> float:
    """ln(1 - g) = ln p(positive), resolvable even when g rounds to 1."""
    _check_tau(inp.tau)
    if not inp.neg_sims:
        return 0.0
    z = np.array([-g / inp.tau for g in inp.gaps])
    m = float(z.max())
    lse = m + math.log(float(np.sum(np.exp(z - m))))
    # -softplus(lse)
    return -(lse + math.log1p(math.exp(-lse))) if lse > 0 else -math.log1p(math.exp(lse))


def g_factor_approx(rho: float, tau: float, B: int) -> float:
    """Equal-gap form 1 - 1 / (1 + B e^{-rho/tau})."""
    _check_tau(tau)
    if B < 0:
        raise ValueError("B must be non-negative")
    if B == 0:
        return 0.0
    # B e^{-x} / (1 + B e^{-x}) written to avoid overflow for very negative rho
    x = -rho / tau + math.log(B)
    if x > 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@dataclass
class BatchSizeTrend:
    batch_sizes: list[int]
    values: list[float]
    increasing: bool


def batch_size_trend(rho: float, tau: float, B_list: Sequence[int]) -> BatchSizeTrend:
    if not math.isfinite(rho):
        raise ValueError("rho must be finite")
    values = [g_factor_approx(rho, tau, b) for b in B_list]
    increasing = all(b > a for a, b in zip(values, values[1:]))
    return BatchSizeTrend(list(B_list), values, increasing)


def same_class_gain(
    pos_sim: float, same_class_neg: float, cross_class_neg: float, tau: float, B: int
) -> tuple[float, float]:
    """g with B hard (same-class) negatives vs. B easy (cross-class) ones."""
    if same_class_neg < cross_class_neg:
        raise ValueError("same-class negative must be at least as similar as the cross-class one")
    g_same = g_factor(GradientFactorInput(pos_sim, [same_class_neg] * B, tau))
    g_cross = g_factor(GradientFactorInput(pos_sim, [cross_class_neg] * B, tau))
    return g_same, g_cross


@dataclass
class TauLimits:
    g_tiny_tau: float
    g_huge_tau: float
    uniform_limit: float
    tiny_tau_valid: bool

    @property
    def vanishes(self) -> bool | None:
        return self.g_tiny_tau < 1e-6 if self.tiny_tau_valid else None

    @property
    def saturates(self) -> bool:
        return abs(self.g_huge_tau - self.uniform_limit) < 1e-3


TINY_TAU = 1e-3
HUGE_TAU = 1e3


def tau_limits(inp: GradientFactorInput) -> TauLimits:
    """g at tau = 1e-3 and tau = 1e3.

    The small-tau limit is zero only when the positive strictly beats every
    negative; otherwise ``tiny_tau_valid`` is False and ``vanishes`` is None.
    """
    b = len(inp.neg_sims)
    valid = all(inp.pos_sim > n for n in inp.neg_sims)
    return TauLimits(
        g_tiny_tau=g_factor(GradientFactorInput(inp.pos_sim, inp.neg_sims, TINY_TAU)),
        g_huge_tau=g_factor(GradientFactorInput(inp.pos_sim, inp.neg_sims, HUGE_TAU)),
        uniform_limit=b / (b + 1),
        tiny_tau_valid=valid,
    )


def alignment_error(batch: LogitBatch) -> np.ndarray:
    """Row i is t_i - s_i (plain array, no gradient)."""
    return batch.teacher.values - batch.student.values


def triple_count(query: TripleCountQuery) -> dict[str, int]:
    n, m, c = query.n, query.m, query.c
    return {"classic": (m - 1) * (n - m), "crd": n - m, "ckd": c}


def matrix_rank(a: np.ndarray, tol: float = 1e-9) -> int:
    """Rank by Gaussian elimination with partial pivoting."""
    a = np.array(a, dtype=np.float64, copy=True)
    rows, cols = a.shape
    rank = 0
    for col in range(cols):
        if rank == rows:
            break
        pivot = rank + int(np.argmax(np.abs(a[rank:, col])))
        if abs(a[pivot, col]) <= tol:
            continue
        if pivot != rank:
            a[[rank, pivot]] = a[[pivot, rank]]
        a[rank + 1 :] -= np.outer(a[rank + 1 :, col] / a[rank, col], a[rank])
        rank += 1
    return rank


def rank_bound(c: int, n: int, negatives: np.ndarray) -> tuple[int, int]:
    negatives = np.asarray(negatives)
    if negatives.shape != (n - 1, c):
        raise ValueError(f"expected a {(n - 1, c)} negative matrix, got {negatives.shape}")
    return min(c, n - 1), matrix_rank(negatives)
