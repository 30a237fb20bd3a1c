"""Distillation losses on teacher/student logit batches.

All similarity-based losses L2-normalise both logit matrices first, and the
teacher side is always detached: no loss here ever sends gradient into the
teacher.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor


class SimilarityKind(str, enum.Enum):
    COSINE = "cosine"  # f(u, v) = u.v on unit rows, d = 1 - f
    NEG_SQ_EUCLIDEAN = "neg-sq-euclidean"  # f(u, v) = -|u - v|^2, d = -f


class TripleStrategy(str, enum.Enum):
    TEACHER_ANCHOR = "teacher-anchor"  # (t_i, s_i, s_j)
    STUDENT_STUDENT = "student-student"  # (s_i, t_i, s_j)
    STUDENT_TEACHER = "student-teacher"  # (s_i, t_i, t_j)


class NegativeScope(str, enum.Enum):
    ALL = "all"
    CROSS_CLASS = "cross-class"


class KDKind(str, enum.Enum):
    CKD = "ckd"
    VANILLA = "vanilla"
    COMBINED = "combined"
    NONE = "none"


class DegenerateBatchError(ValueError):
    pass


@dataclass
class LogitBatch:
    teacher: Tensor
    student: Tensor
    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.teacher.shape != self.student.shape:
            raise ValueError(f"teacher {self.teacher.shape} vs student {self.student.shape}")
        if len(self.teacher.shape) != 2:
            raise ValueError("logits must be B x c matrices")
        b, c = self.teacher.shape
        if b < 1 or c < 2:
            raise ValueError(f"need B >= 1 and c >= 2, got B={b}, c={c}")
        if self.labels.shape[0] != b:
            raise ValueError(f"{self.labels.shape[0]} labels for a batch of {b}")

    @property
    def size(self) -> int:
        return self.teacher.shape[0]


@dataclass
class DistillConfig:
    alpha: float = 100.0
    beta: float = 1.0
    tau: float = 1.0
    kd_temperature: float = 4.0
    similarity: SimilarityKind = SimilarityKind.COSINE
    triple: TripleStrategy = TripleStrategy.TEACHER_ANCHOR
    negative_scope: NegativeScope = NegativeScope.ALL

    def __post_init__(self):
        self.similarity = SimilarityKind(self.similarity)
        self.triple = TripleStrategy(self.triple)
        self.negative_scope = NegativeScope(self.negative_scope)
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not self.kd_temperature > 0:
            raise ValueError(f"kd_temperature must be positive, got {self.kd_temperature}")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be non-negative")


_UNIT_TOL = 1e-9


def similarity_matrix(a: Tensor, b: Tensor, kind: SimilarityKind) -> Tensor:
    """B x B grid with entry (i, j) = f(a_i, b_j)."""
    if a.shape != b.shape or len(a.shape) != 2:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    kind = SimilarityKind(kind)
    if kind is SimilarityKind.COSINE:
        for name, x in (("a", a), ("b", b)):
            norms = np.linalg.norm(x.values, axis=1)
            if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
                raise ValueError(f"cosine similarity needs unit rows in {name}")
        return a @ b.T
    return -tn.pairwise_sq_dist(a, b)


def _distance_from_similarity(f: Tensor, kind: SimilarityKind) -> Tensor:
    return 1.0 - f if kind is SimilarityKind.COSINE else -f


def _normalized(batch: LogitBatch) -> tuple[Tensor, Tensor]:
    return tn.l2_normalize_rows(batch.teacher.detach()), tn.l2_normalize_rows(batch.student)


def intra_loss(batch: LogitBatch, kind: SimilarityKind = SimilarityKind.COSINE) -> Tensor:
    kind = SimilarityKind(kind)
    t, s = _normalized(batch)
    if kind is SimilarityKind.COSINE:
        f = (t * s).sum(axis=1)
    else:
        diff = t - s
        f = -(diff * diff).sum(axis=1)
    return _distance_from_similarity(f, kind).mean()


def inter_loss(
    batch: LogitBatch,
    kind: SimilarityKind = SimilarityKind.COSINE,
    include_teacher_negs: bool = False,
) -> Tensor:
    """Negative mean pairwise distance over ordered pairs i != j."""
    kind = SimilarityKind(kind)
    b = batch.size
    t, s = _normalized(batch)
    if b == 1:
        return (s * 0.0).sum()
    off = 1.0 - np.eye(b)
    d = _distance_from_similarity(similarity_matrix(s, s, kind), kind)
    if include_teacher_negs:
        d = d + _distance_from_similarity(similarity_matrix(s, t, kind), kind)
    return -((d * off).sum() / (b * (b - 1)))


def combined_kd_loss(batch: LogitBatch, cfg: DistillConfig) -> Tensor:
    return intra_loss(batch, cfg.similarity) + inter_loss(batch, cfg.similarity) * cfg.beta


def vanilla_kd_loss(batch: LogitBatch, kd_temperature: float) -> Tensor:
    """Hinton KL(p_teacher || p_student) at temperature T, scaled by T^2."""
    if not kd_temperature > 0:
        raise ValueError(f"kd_temperature must be positive, got {kd_temperature}")
    log_p_t = tn.log_softmax_rows(batch.teacher.detach(), kd_temperature).values
    p_t = np.exp(log_p_t)
    log_p_s = tn.log_softmax_rows(batch.student, kd_temperature)
    # sum p_t log p_t is a constant; kept so the value is a true KL
    const = float(np.sum(p_t * log_p_t))
    cross = (log_p_s * p_t).sum()
    return (cross * -1.0 + const) * (kd_temperature**2 / batch.size)


def contrastive_logits(batch: LogitBatch, cfg: DistillConfig) -> Tensor:
    """B x B similarity rows for the chosen triple; the positive sits on the diagonal."""
    t, s = _normalized(batch)
    kind = cfg.similarity
    if cfg.triple is TripleStrategy.TEACHER_ANCHOR:
        return similarity_matrix(t, s, kind)
    if cfg.triple is TripleStrategy.STUDENT_TEACHER:
        return similarity_matrix(s, t, kind)
    eye = np.eye(batch.size)
    pos = similarity_matrix(t, s, kind) * eye
    return similarity_matrix(s, s, kind) * (1.0 - eye) + pos


def negative_mask(labels: np.ndarray, scope: NegativeScope) -> np.ndarray:
    """True where column j is excluded from row i's denominator."""
    labels = np.asarray(labels)
    if NegativeScope(scope) is NegativeScope.ALL:
        return np.zeros((labels.size, labels.size), dtype=bool)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    return same


def ckd_loss_rows(batch: LogitBatch, cfg: DistillConfig) -> Tensor:
    """Per-sample contrastive loss, a B-way cross-entropy with diagonal targets."""
    mask = negative_mask(batch.labels, cfg.negative_scope)
    if cfg.negative_scope is NegativeScope.CROSS_CLASS and np.all(batch.labels == batch.labels[0]):
        raise DegenerateBatchError("cross-class negatives requested but every label is identical")
    return contrastive_rows_from_similarity(contrastive_logits(batch, cfg), cfg.tau, mask)


def contrastive_rows_from_similarity(sim: Tensor, tau: float, mask: np.ndarray | None = None) -> Tensor:
    """-log softmax(sim_i / tau)[i] per row; masked columns drop out of the denominator."""
    logits = sim / tau
    if mask is not None and mask.any():
        logits = tn.masked_fill(logits, mask, -np.inf)
    return tn.cross_entropy_rows(logits, np.arange(sim.shape[0]))


def ckd_loss(batch: LogitBatch, cfg: DistillConfig) -> Tensor:
    return ckd_loss_rows(batch, cfg).mean()


def kd_loss(batch: LogitBatch, cfg: DistillConfig, kd_kind: KDKind) -> Tensor | None:
    kd_kind = KDKind(kd_kind)
    if kd_kind is KDKind.CKD:
        return ckd_loss(batch, cfg)
    if kd_kind is KDKind.VANILLA:
        return vanilla_kd_loss(batch, cfg.kd_temperature)
    if kd_kind is KDKind.COMBINED:
        return combined_kd_loss(batch, cfg)
    return None


def objective_terms(
    batch: LogitBatch, cfg: DistillConfig, kd_kind: KDKind = KDKind.CKD
) -> tuple[Tensor, Tensor, Tensor | None]:
    """(total, task, kd) with total = task + alpha * kd; kd is None for ``none``."""
    task = tn.cross_entropy_from_logits(batch.student, batch.labels)
    kd = kd_loss(batch, cfg, kd_kind)
    if kd is None:
        return task, task, None
    return task + kd * cfg.alpha, task, kd


def total_objective(batch: LogitBatch, cfg: DistillConfig, kd_kind: KDKind = KDKind.CKD) -> Tensor:
    return objective_terms(batch, cfg, kd_kind)[0]
