"""``ckd`` command line: train, sweep, verify, report.

Exit codes: 0 success, 1 check/run failure, 2 configuration error,
3 training aborted on a non-finite loss.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

from . import verify as verify_mod
from .experiments import (
    AXES,
    ExperimentConfig,
    SweepSpec,
    build_config,
    build_report,
    default_out_dir,
    load_data,
    obtain_teacher,
    parse_config_text,
    run_student,
    run_sweep,
)
from .losses import KDKind
from .train import ConfigError, TrainingDiverged, evaluate

logger = logging.getLogger("ckd")

EXIT_FAIL, EXIT_CONFIG, EXIT_NAN = 1, 2, 3

# long flag -> argparse kwargs; the config field is the flag with '-' -> '_'
_FLAGS = {
    "kd": dict(choices=[k.value for k in KDKind]),
    "alpha": dict(type=float),
    "beta": dict(type=float),
    "tau": dict(type=float),
    "kd-temp": dict(type=float),
    "triple": dict(choices=["teacher-anchor", "student-student", "student-teacher"]),
    "neg-scope": dict(choices=["all", "cross-class"]),
    "similarity": dict(choices=["cosine", "neg-sq-euclidean"]),
    "batch": dict(type=int),
    "epochs": dict(type=int),
    "lr": dict(type=float),
    "min-lr": dict(type=float),
    "momentum": dict(type=float),
    "weight-decay": dict(type=float),
    "seed": dict(type=int),
    "teacher": dict(metavar="PATH"),
    "teacher-epochs": dict(type=int),
    "teacher-lr": dict(type=float),
    "teacher-hidden": dict(metavar="W[,W...]"),
    "student-hidden": dict(metavar="W[,W...]"),
    "dataset": dict(metavar="synthetic|cifar100:DIR"),
    "classes": dict(type=int),
    "per-class": dict(type=int),
    "dim": dict(type=int),
    "center-scale": dict(type=float),
    "noise-sigma": dict(type=float),
    "data-seed": dict(type=int),
    "out": dict(metavar="DIR"),
    "workers": dict(type=int),
}


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="flat 'key = value' file; keys are the long flag names")
    for name, kw in _FLAGS.items():
        p.add_argument(f"--{name}", dest=name.replace("-", "_"), default=None, **kw)
    p.add_argument("--record-time", dest="record_time", action="store_const", const=True, default=None,
                   help="log real wall_ms (makes metrics logs non-reproducible)")


def resolve_config(args: argparse.Namespace) -> ExperimentConfig:
    """defaults < config file < flags"""
    file_values = {}
    if args.config:
        file_values = parse_config_text(Path(args.config).read_text(), args.config)
    overrides = {}
    for name in list(_FLAGS) + ["record-time"]:
        value = getattr(args, name.replace("-", "_"))
        if value is not None:
            overrides[name.replace("-", "_")] = value
    return build_config(file_values, overrides)


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    out = default_out_dir(cfg.out or None)
    out.mkdir(parents=True, exist_ok=True)
    train_data, test_data = load_data(cfg)
    t0 = time.perf_counter()
    if KDKind(cfg.kd) is KDKind.NONE:
        teacher = None
    else:
        teacher, _ = obtain_teacher(cfg, train_data, test_data, out)
        logger.info("teacher test accuracy %.4f", evaluate(teacher, test_data))
    try:
        result = run_student(cfg, teacher, train_data, test_data, cfg.seed, out)
    except TrainingDiverged as exc:
        with open(out / "student_metrics.jsonl", "a") as fh:
            fh.write(exc.record.to_json() + "\n")
        print(f"aborted: {exc}", file=sys.stderr)
        return EXIT_NAN
    final = result.history[-1]
    print(f"final test accuracy {final.test_accuracy:.4f} after {len(result.history)} epochs "
          f"({time.perf_counter() - t0:.1f}s); logs in {out}")
    return 0


def cmd_sweep(args) -> int:
    base = resolve_config(args)
    spec = SweepSpec(args.axis, [v for v in args.values.split(",") if v], args.repeats, base)
    out = default_out_dir(base.out or None)
    rows, failures = run_sweep(spec, out, workers=base.workers)
    print(f"{spec.axis:>16}  median   iqr      n")
    for row in rows:
        if row.accuracies:
            print(f"{str(row.value):>16}  {row.median:.4f}   {row.iqr:.4f}   {len(row.accuracies)}")
        else:
            print(f"{str(row.value):>16}  (all runs failed)")
    for f in failures:
        print(f"failed: {f}", file=sys.stderr)
    print(f"report: {out / 'report.csv'}")
    return EXIT_FAIL if failures else 0


def cmd_verify(args) -> int:
    results = verify_mod.run_all(args.seed)
    for r in results:
        print(r.line())
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} checks passed")
    return EXIT_FAIL if n_fail else 0


def cmd_report(args) -> int:
    try:
        rep = build_report(args.logs)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out = default_out_dir(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(rep["table"])
    (out / "summary.csv").write_text(rep["summary"])
    (out / "plot_data.txt").write_text(rep["plot"])
    if rep["notes"]:
        print(f"note: {rep['notes']}", file=sys.stderr)
    sys.stdout.write(rep["summary"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ckd", description="Contrastive logit distillation experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pre-train (or load) a teacher, then distil a student")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="ablation sweep over one axis")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=sorted(AXES))
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("verify", help="run the property and oracle checks")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="compare metrics logs")
    p.add_argument("logs", nargs="+")
    p.add_argument("--out", metavar="DIR")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
