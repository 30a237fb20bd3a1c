"""Desk-scale ablations: temperature, batch size, triple strategy, negative scope.

Every axis shares one teacher. Each axis writes its own report.csv under --out.
"""

import argparse
import dataclasses
from pathlib import Path

from ckd.experiments import ExperimentConfig, SweepSpec, load_data, obtain_teacher, run_sweep

AXES = {
    "temperature": [0.07, 0.25, 0.5, 1.0, 2.0, 4.0],
    "batch_size": [8, 16, 32, 64, 128, 256, 512],
    "triple": ["teacher-anchor", "student-student", "student-teacher"],
    "negative_scope": ["all", "cross-class"],
}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/ablations")
    ap.add_argument("--axes", default=",".join(AXES), help="comma-separated subset of " + ", ".join(AXES))
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--epochs", type=int, default=None, help="student epochs (default: config default)")
    args = ap.parse_args()

    base = ExperimentConfig().validate()
    if args.epochs:
        base = dataclasses.replace(base, epochs=args.epochs).validate()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_data, test_data = load_data(base)
    teacher, _ = obtain_teacher(base, train_data, test_data, out)

    for axis in args.axes.split(","):
        spec = SweepSpec(axis, AXES[axis], args.repeats, base)
        rows, failures = run_sweep(spec, out / axis, workers=args.workers, teacher=teacher)
        best = max((r for r in rows if r.accuracies), key=lambda r: r.median)
        print(f"== {axis} (best {best.value})")
        for r in rows:
            line = f"{r.median:.4f} +- {r.iqr:.4f}" if r.accuracies else "all runs failed"
            print(f"  {str(r.value):>16}  {line}")
        for f in failures:
            print("  failed:", f)


if __name__ == "__main__":
    main()
