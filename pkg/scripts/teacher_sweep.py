"""Vanilla vs calibrated distillation across teacher widths (in memory).

Uses the same defaults as ``calikd sweep`` but writes no artifacts; handy
for quick experiments with ``--set`` style overrides.

    python scripts/teacher_sweep.py --set seeds=[0,1] --set train.max_epochs=30
"""

import argparse
import time

from calikd import distill
from calikd.experiment import ExperimentConfig
from calikd.report import baseline_tables, calibration_tables, student_tables


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config")
    ap.add_argument("--set", action="append", default=[])
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    cfg = ExperimentConfig.load(args.config, args.set)
    raw = cfg.raw
    start = time.perf_counter()
    table = distill.teacher_size_sweep(
        raw["teacher_sizes"], raw["student_sizes"], cfg.splits(), cfg.train_config(0),
        cfg.distill_config("vanilla"), raw["seeds"], raw["teacher_depth"], raw["student_depth"],
        raw["bins"], raw["bounds"], jobs=args.jobs)
    for title, tables in (("teachers", baseline_tables(table)), ("calibration", calibration_tables(table)),
                          ("students", student_tables(table))):
        print(f"== {title}\n{tables[1]}")
    print(table.verdict())
    print(f"paired cells with calibrated >= vanilla: {table.paired_win_fraction():.0%}")
    print(f"elapsed {time.perf_counter() - start:.0f}s")


if __name__ == "__main__":
    main()
