"""Sample-wise contrastive logit distillation at desk scale."""

from .losses import (
    DistillConfig,
    KDKind,
    LogitBatch,
    NegativeScope,
    SimilarityKind,
    TripleStrategy,
    ckd_loss,
    combined_kd_loss,
    intra_loss,
    inter_loss,
    total_objective,
    vanilla_kd_loss,
)
from .tensor import Tensor, backward

__version__ = "0.1.0"
