"""Student distillation loop, evaluation, checkpoints and the metrics log.

One step per mini-batch: teacher and student logits, ``task + alpha * kd``,
backward through the student only, then SGD with classical momentum and
weight decay under a per-step cosine learning-rate schedule.
"""

from __future__ import annotations

import json
import logging
import math
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import Dataset, batch_iter
from .losses import DistillConfig, KDKind, LogitBatch, objective_terms
from .models import MlpSpec, init_mlp, mlp_forward, predict_logits
from .tensor import Tensor, backward

logger = logging.getLogger(__name__)

CKPT_MAGIC = b"CKD1"


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    task_loss: float
    kd_loss: float
    total_loss: float
    train_accuracy: float
    test_accuracy: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> EpochRecord:
        obj = json.loads(line)
        names = [f for f in cls.__dataclass_fields__]
        if sorted(obj) != sorted(names):
            raise ValueError(f"fields {sorted(obj)} do not match {sorted(names)}")
        return cls(**obj)


class TrainingDiverged(RuntimeError):
    def __init__(self, record: EpochRecord, step: int):
        super().__init__(f"non-finite loss at epoch {record.epoch}, step {step}")
        self.record = record
        self.step = step


@dataclass
class TrainConfig:
    epochs: int = 30
    base_lr: float = 0.05
    min_lr: float = 1e-4
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0
    distill: DistillConfig = field(default_factory=DistillConfig)
    kd_kind: KDKind = KDKind.CKD
    weight_decay: float = 5e-4

    def __post_init__(self):
        self.kd_kind = KDKind(self.kd_kind)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if not 0 < self.min_lr <= self.base_lr and not (self.base_lr == 0 and self.min_lr == 0):
            raise ConfigError(f"need 0 < min_lr <= base_lr, got {self.min_lr}, {self.base_lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")


def cosine_lr(step: int, total_steps: int, base_lr: float, min_lr: float) -> float:
    if total_steps < 1 or not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total_steps))


def accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    # np.argmax returns the first maximum, i.e. ties go to the lowest class index
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def evaluate(params: Sequence[Tensor], data: Dataset) -> float:
    return accuracy_from_logits(predict_logits(params, data.features), data.labels)


def train(
    teacher_params: Sequence[Tensor] | None,
    student_spec: MlpSpec,
    train_data: Dataset,
    test_data: Dataset,
    cfg: TrainConfig,
    log_path: str | Path | None = None,
    record_time: bool = False,
    student_params: Sequence[Tensor] | None = None,
) -> tuple[list[Tensor], list[EpochRecord]]:
    """Train a student (optionally against a frozen teacher).

    With ``record_time`` off, ``wall_ms`` is logged as 0 so that identical runs
    give byte-identical logs.
    """
    if cfg.kd_kind is not KDKind.NONE and teacher_params is None:
        raise ConfigError(f"kd_kind={cfg.kd_kind.value} needs a teacher")
    if student_spec.input_dim != train_data.dim:
        raise ConfigError(f"student input width {student_spec.input_dim} != data dim {train_data.dim}")
    if student_spec.num_classes != train_data.class_count:
        raise ConfigError("student class count differs from the data")
    if teacher_params is not None and teacher_params[-1].shape[0] != student_spec.num_classes:
        raise ConfigError("teacher and student disagree on class count")
    if cfg.batch_size > len(train_data):
        raise ConfigError(f"batch size {cfg.batch_size} exceeds dataset size {len(train_data)}")

    params = [Tensor(p.values, requires_grad=True) for p in (student_params or init_mlp(student_spec))]
    velocity = [np.zeros_like(p.values) for p in params]
    teacher_logits = None
    if cfg.kd_kind is not KDKind.NONE:
        teacher_logits = predict_logits(teacher_params, train_data.features)

    steps_per_epoch = len(train_data) // cfg.batch_size
    total_steps = cfg.epochs * steps_per_epoch
    log_fh = open(log_path, "a") if log_path is not None else None
    history: list[EpochRecord] = []
    step = 0
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            epoch_lr = cosine_lr(step, total_steps, cfg.base_lr, cfg.min_lr)
            sums = np.zeros(3)
            for idx in batch_iter(train_data, cfg.batch_size, cfg.seed, epoch):
                lr = cosine_lr(step, total_steps, cfg.base_lr, cfg.min_lr)
                x = Tensor(train_data.features[idx])
                labels = train_data.labels[idx]
                student = mlp_forward(params, x)
                if teacher_logits is None:
                    teacher = Tensor(np.zeros(student.shape))
                else:
                    teacher = Tensor(teacher_logits[idx])
                batch = LogitBatch(teacher, student, labels)
                total, task, kd = objective_terms(batch, cfg.distill, cfg.kd_kind)
                kd_value = 0.0 if kd is None else kd.item()
                if not np.isfinite(total.item()):
                    rec = EpochRecord(epoch, lr, task.item(), kd_value, total.item(), float("nan"),
                                      float("nan"), 0.0)
                    raise TrainingDiverged(rec, step)
                backward(total, params)
                for p, v in zip(params, velocity):
                    g = p.grad + cfg.weight_decay * p.values
                    v *= cfg.momentum
                    v += g
                    p.values = p.values - lr * v
                    p.values.flags.writeable = False
                sums += (task.item(), kd_value, total.item())
                step += 1
            means = sums / steps_per_epoch
            rec = EpochRecord(
                epoch=epoch,
                lr=epoch_lr,
                task_loss=float(means[0]),
                kd_loss=float(means[1]),
                total_loss=float(means[2]),
                train_accuracy=evaluate(params, train_data),
                test_accuracy=evaluate(params, test_data),
                wall_ms=round((time.perf_counter() - t0) * 1000.0, 3) if record_time else 0.0,
            )
            history.append(rec)
            logger.debug("epoch %d: %s", epoch, rec)
            if log_fh is not None:
                log_fh.write(rec.to_json() + "\n")
                log_fh.flush()
    finally:
        if log_fh is not None:
            log_fh.close()
    return params, history


def read_metrics_log(path) -> list[EpochRecord]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(EpochRecord.from_json(line))
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed metrics line ({exc})") from None
    return records


def save_checkpoint(params: Sequence[Tensor], path) -> None:
    parts = [CKPT_MAGIC, struct.pack("<I", len(params))]
    for p in params:
        v = np.ascontiguousarray(p.values, dtype="<f8")
        parts.append(struct.pack("<I", v.ndim))
        parts.append(struct.pack(f"<{v.ndim}I", *v.shape))
        parts.append(v.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path, expected_shapes: Sequence[tuple[int, ...]] | None = None) -> list[Tensor]:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {blob[:4]!r}")
    pos = 4

    def take(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        out = struct.unpack_from(fmt, blob, pos)
        pos += size
        return out

    (count,) = take("<I")
    params = []
    for _ in range(count):
        (rank,) = take("<I")
        shape = take(f"<{rank}I")
        n = int(np.prod(shape)) if rank else 1
        if pos + 8 * n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos}")
        values = np.frombuffer(blob, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        params.append(Tensor(values.astype(np.float64)))
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    if expected_shapes is not None:
        got = [p.shape for p in params]
        want = [tuple(s) for s in expected_shapes]
        if got != want:
            raise CheckpointError(f"{path}: shape table {got} does not match expected {want}")
    return params
