"""CE-only vs CE+CKD vs CE+vanilla KD on the desk-scale synthetic task.

Trains one teacher, then five students per method (sweep seeds), and prints
median final test accuracy. Per-run logs land under --out.
"""

import argparse
import dataclasses
import time
from pathlib import Path

from ckd.experiments import ExperimentConfig, SweepSpec, load_data, obtain_teacher, run_sweep
from ckd.train import evaluate


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/distill_benefit")
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--data-seed", type=int, default=0)
    ap.add_argument("--vanilla-alpha", type=float, default=1.0)
    ap.add_argument("--workers", type=int, default=1)
    args = ap.parse_args()

    out = Path(args.out)
    base = ExperimentConfig(data_seed=args.data_seed).validate()
    t0 = time.perf_counter()
    train_data, test_data = load_data(base)
    out.mkdir(parents=True, exist_ok=True)
    teacher, _ = obtain_teacher(base, train_data, test_data, out)
    print(f"teacher test accuracy {evaluate(teacher, test_data):.4f}")

    results = {}
    for kinds, alpha in ((["none", "ckd", "combined"], base.alpha), (["vanilla"], args.vanilla_alpha)):
        spec = SweepSpec("kd_kind", kinds, args.repeats, dataclasses.replace(base, alpha=alpha))
        rows, failures = run_sweep(spec, out / f"alpha={alpha:g}", workers=args.workers, teacher=teacher)
        for f in failures:
            print("failed:", f)
        results.update({r.value: r for r in rows})

    ce = results["none"].median
    print(f"{'method':>10}  median    delta_vs_CE  iqr")
    for name, row in results.items():
        print(f"{name:>10}  {row.median:.4f}   {100 * (row.median - ce):+6.2f} pp   {row.iqr:.4f}")
    print(f"{time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
