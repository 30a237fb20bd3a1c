"""Experiment configuration, single runs, sweeps and report aggregation.

Configuration is layered: dataclass defaults, then a flat ``key = value``
file, then command-line flags. Keys are the long flag names.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import logging
import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .data import Dataset, SyntheticSpec, generate_synthetic, load_cifar100
from .losses import DistillConfig, KDKind, NegativeScope, SimilarityKind, TripleStrategy
from .models import MlpSpec
from .rng import mix_seed
from .tensor import Tensor
from .train import (
    ConfigError,
    EpochRecord,
    TrainConfig,
    load_checkpoint,
    read_metrics_log,
    save_checkpoint,
    train,
)

logger = logging.getLogger(__name__)

TEACHER_STREAM = 0x7EAC
STUDENT_STREAM = 0x57D7


def _int_list(text: str) -> tuple[int, ...]:
    text = str(text).strip()
    return tuple(int(v) for v in text.split(",") if v.strip()) if text else ()


@dataclass
class ExperimentConfig:
    kd: str = "ckd"
    alpha: float = 100.0
    beta: float = 1.0
    tau: float = 1.0
    kd_temp: float = 4.0
    triple: str = "teacher-anchor"
    neg_scope: str = "all"
    similarity: str = "cosine"
    batch: int = 64
    epochs: int = 3
    lr: float = 0.01
    min_lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 5e-4
    seed: int = 0
    teacher: str = ""
    teacher_epochs: int = 20
    teacher_lr: float = 0.05
    teacher_hidden: tuple[int, ...] = (64, 64)
    student_hidden: tuple[int, ...] = (12,)
    dataset: str = "synthetic"
    classes: int = 8
    per_class: int = 500
    dim: int = 16
    center_scale: float = 2.0
    noise_sigma: float = 1.0
    data_seed: int = 0
    out: str = ""
    workers: int = 1
    record_time: bool = False

    def validate(self) -> ExperimentConfig:
        self.distill_config()
        self.train_config(self.seed)
        KDKind(self.kd)
        if self.teacher_epochs < 1 or self.workers < 1:
            raise ConfigError("teacher-epochs and workers must be >= 1")
        if not (self.dataset == "synthetic" or self.dataset.startswith("cifar100:")):
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        return self

    def distill_config(self) -> DistillConfig:
        try:
            return DistillConfig(
                alpha=self.alpha,
                beta=self.beta,
                tau=self.tau,
                kd_temperature=self.kd_temp,
                similarity=SimilarityKind(self.similarity),
                triple=TripleStrategy(self.triple),
                negative_scope=NegativeScope(self.neg_scope),
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def train_config(self, seed: int) -> TrainConfig:
        try:
            return TrainConfig(
                epochs=self.epochs,
                base_lr=self.lr,
                min_lr=self.min_lr,
                momentum=self.momentum,
                batch_size=self.batch,
                seed=seed,
                distill=self.distill_config(),
                kd_kind=KDKind(self.kd),
                weight_decay=self.weight_decay,
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def teacher_train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.teacher_epochs,
            base_lr=self.teacher_lr,
            min_lr=min(self.min_lr, self.teacher_lr),
            momentum=self.momentum,
            batch_size=64,
            seed=mix_seed(self.seed, TEACHER_STREAM),
            kd_kind=KDKind.NONE,
            weight_decay=self.weight_decay,
        )


FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}
KEYS = {name.replace("_", "-"): name for name in FIELD_TYPES}


def _coerce(name: str, raw: Any) -> Any:
    default = getattr(ExperimentConfig(), name)
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        text = str(raw).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    try:
        if isinstance(default, tuple):
            return raw if isinstance(raw, tuple) else _int_list(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None
    return str(raw)


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown config key {key!r}")
        out[KEYS[key]] = _coerce(KEYS[key], value)
    return out


def build_config(file_values: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    for layer in (file_values or {}, overrides or {}):
        for name, value in layer.items():
            if name not in FIELD_TYPES:
                raise ConfigError(f"unknown config key {name.replace('_', '-')!r}")
            setattr(cfg, name, _coerce(name, value))
    return cfg.validate()


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "synthetic":
        return generate_synthetic(
            SyntheticSpec(cfg.classes, cfg.per_class, cfg.dim, cfg.center_scale, cfg.noise_sigma, cfg.data_seed)
        )
    return load_cifar100(cfg.dataset.split(":", 1)[1])


def teacher_spec(cfg: ExperimentConfig, data: Dataset) -> MlpSpec:
    return MlpSpec((data.dim, *cfg.teacher_hidden, data.class_count), seed=mix_seed(cfg.seed, TEACHER_STREAM))


def student_spec(cfg: ExperimentConfig, data: Dataset, run_seed: int) -> MlpSpec:
    return MlpSpec((data.dim, *cfg.student_hidden, data.class_count), seed=mix_seed(run_seed, STUDENT_STREAM))


def obtain_teacher(cfg: ExperimentConfig, train_data: Dataset, test_data: Dataset, out_dir: Path | None = None):
    """Load ``cfg.teacher`` or pre-train one on cross-entropy alone."""
    spec = teacher_spec(cfg, train_data)
    if cfg.teacher:
        return load_checkpoint(cfg.teacher, spec.param_shapes()), None
    log = out_dir / "teacher_metrics.jsonl" if out_dir else None
    if log is not None and log.exists():
        log.unlink()
    params, history = train(None, spec, train_data, test_data, cfg.teacher_train_config(), log_path=log,
                            record_time=cfg.record_time)
    if out_dir is not None:
        save_checkpoint(params, out_dir / "teacher.ckpt")
    return [Tensor(p.values) for p in params], history


@dataclass
class RunResult:
    seed: int
    history: list[EpochRecord]
    error: str = ""

    @property
    def final_accuracy(self) -> float:
        return self.history[-1].test_accuracy if self.history and not self.error else float("nan")


def run_student(cfg: ExperimentConfig, teacher, train_data, test_data, run_seed: int,
                out_dir: Path | None = None, tag: str = "student") -> RunResult:
    tcfg = cfg.train_config(run_seed)
    log = ckpt = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log, ckpt = out_dir / f"{tag}_metrics.jsonl", out_dir / f"{tag}.ckpt"
        if log.exists():
            log.unlink()
    kd_teacher = None if tcfg.kd_kind is KDKind.NONE else teacher
    params, history = train(kd_teacher, student_spec(cfg, train_data, run_seed), train_data, test_data, tcfg,
                            log_path=log, record_time=cfg.record_time)
    if ckpt is not None:
        save_checkpoint(params, ckpt)
    return RunResult(run_seed, history)


# --- sweeps -------------------------------------------------------------------

AXES = {
    "temperature": ("tau", float),
    "batch_size": ("batch", int),
    "triple": ("triple", str),
    "negative_scope": ("neg_scope", str),
    "kd_kind": ("kd", str),
}


@dataclass
class SweepSpec:
    axis: str
    values: list
    repeats: int = 5
    base: ExperimentConfig = field(default_factory=ExperimentConfig)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ConfigError(f"unknown sweep axis {self.axis!r}; choose from {sorted(AXES)}")
        if not self.values:
            raise ConfigError("sweep needs at least one value")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        cast = AXES[self.axis][1]
        self.values = [cast(v) for v in self.values]
        for v in self.values:
            self.config_for(v)

    def config_for(self, value) -> ExperimentConfig:
        cfg = dataclasses.replace(self.base)
        setattr(cfg, AXES[self.axis][0], value)
        return cfg.validate()

    def run_seed(self, value_index: int, repeat: int) -> int:
        return mix_seed(self.base.seed, value_index, repeat)


@dataclass
class ReportRow:
    value: Any
    accuracies: list[float]

    @property
    def median(self) -> float:
        return statistics.median(self.accuracies)

    @property
    def mean(self) -> float:
        return statistics.fmean(self.accuracies)

    @property
    def iqr(self) -> float:
        if len(self.accuracies) < 2:
            return 0.0
        q1, _, q3 = statistics.quantiles(self.accuracies, n=4, method="inclusive")
        return q3 - q1


def _sweep_job(args):
    spec, teacher_values, vi, rep, out_dir = args
    train_data, test_data = load_data(spec.base)
    cfg = spec.config_for(spec.values[vi])
    seed = spec.run_seed(vi, rep)
    teacher = [Tensor(v) for v in teacher_values]
    run_dir = None if out_dir is None else Path(out_dir) / f"{spec.axis}={spec.values[vi]}" / f"rep{rep}"
    try:
        return vi, rep, run_student(cfg, teacher, train_data, test_data, seed, run_dir)
    except Exception as exc:  # recorded in the report, never silently dropped
        logger.error("run %s=%s rep %d failed: %s", spec.axis, spec.values[vi], rep, exc)
        return vi, rep, RunResult(seed, [], error=f"{type(exc).__name__}: {exc}")


def run_sweep(spec: SweepSpec, out_dir: str | Path | None = None, workers: int = 1,
              teacher=None) -> tuple[list[ReportRow], list[str]]:
    """Run |values| x repeats students against one shared teacher.

    Returns report rows and a list of failure descriptions.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    train_data, test_data = load_data(spec.base)
    if teacher is None:
        teacher, _ = obtain_teacher(spec.base, train_data, test_data, out)
    teacher_values = [t.values for t in teacher]
    jobs = [(spec, teacher_values, vi, rep, out) for vi in range(len(spec.values)) for rep in range(spec.repeats)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    results.sort(key=lambda r: (r[0], r[1]))
    rows, failures = [], []
    for vi, value in enumerate(spec.values):
        accs = []
        for _, rep, res in (r for r in results if r[0] == vi):
            if res.error:
                failures.append(f"{spec.axis}={value} rep={rep}: {res.error}")
            else:
                accs.append(res.final_accuracy)
        rows.append(ReportRow(value, accs))
    if out is not None:
        (out / "report.csv").write_text(sweep_report_csv(spec, rows, failures))
    return rows, failures


def sweep_report_csv(spec: SweepSpec, rows: Sequence[ReportRow], failures: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([spec.axis] + [f"seed{r}" for r in range(spec.repeats)] + ["median", "iqr", "mean", "failed"])
    for row in rows:
        accs = [f"{a:.6f}" for a in row.accuracies] + [""] * (spec.repeats - len(row.accuracies))
        if row.accuracies:
            stats = [f"{row.median:.6f}", f"{row.iqr:.6f}", f"{row.mean:.6f}"]
        else:
            stats = ["", "", ""]
        w.writerow([row.value] + accs + stats + [spec.repeats - len(row.accuracies)])
    for f in failures:
        w.writerow([f"# failed: {f}"])
    return buf.getvalue()


# --- report -------------------------------------------------------------------

RECORD_FIELDS = [f.name for f in dataclasses.fields(EpochRecord)]


def _fmt(v: float) -> str:
    return repr(float(v)) if not isinstance(v, int) else str(v)


def build_report(log_paths: Sequence[str | Path]) -> dict[str, str]:
    """Per-epoch comparison table, final-accuracy summary and x/y plot data."""
    if not log_paths:
        raise ValueError("report needs at least one metrics log")
    paths = [Path(p) for p in log_paths]
    stems = [p.stem for p in paths]
    # logs from different run directories usually share a file name
    names = [f"{p.parent.name}/{p.stem}" if stems.count(p.stem) > 1 else p.stem for p in paths]
    runs = [(name, read_metrics_log(p)) for name, p in zip(names, paths)]
    for name, hist in runs:
        if not hist:
            raise ValueError(f"{name}: empty metrics log")
    n_epochs = min(len(h) for _, h in runs)
    notes = []
    if any(len(h) != n_epochs for _, h in runs):
        notes.append(f"truncated to {n_epochs} epochs (shortest log); lengths were "
                     + ", ".join(f"{n}={len(h)}" for n, h in runs))

    table = io.StringIO()
    w = csv.writer(table, lineterminator="\n")
    if len(runs) == 1:
        w.writerow(RECORD_FIELDS)
        for rec in runs[0][1]:
            w.writerow([_fmt(getattr(rec, f)) for f in RECORD_FIELDS])
    else:
        w.writerow(["epoch"] + [f"{n}.{f}" for n, _ in runs for f in RECORD_FIELDS if f != "epoch"])
        for e in range(n_epochs):
            row = [str(runs[0][1][e].epoch)]
            for _, h in runs:
                row += [_fmt(getattr(h[e], f)) for f in RECORD_FIELDS if f != "epoch"]
            w.writerow(row)

    summary = io.StringIO()
    sw = csv.writer(summary, lineterminator="\n")
    sw.writerow(["run", "epochs", "final_test_accuracy", "delta_vs_first"])
    base = runs[0][1][n_epochs - 1].test_accuracy
    for name, h in runs:
        acc = h[n_epochs - 1].test_accuracy
        sw.writerow([name, n_epochs, f"{acc:.6f}", f"{acc - base:+.6f}"])
    for note in notes:
        sw.writerow([f"# {note}"])

    plot = io.StringIO()
    for name, h in runs:
        plot.write(f"# {name}: epoch test_accuracy\n")
        for rec in h[:n_epochs]:
            plot.write(f"{rec.epoch} {rec.test_accuracy!r}\n")
        plot.write("\n")
    return {"table": table.getvalue(), "summary": summary.getvalue(), "plot": plot.getvalue(), "notes": "\n".join(notes)}


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def default_out_dir(flag_value: str | None) -> Path:
    return Path(flag_value or os.environ.get("CKD_OUT_DIR") or "runs")
