"""``calikd`` command line: train teachers, calibrate, distill, report.

Exit codes: 0 success, 1 validation/configuration error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import data, distill, report
from .errors import CalikdError, ConfigurationError, FormatError, ValidationError
from .experiment import (ExperimentConfig, Layout, collect_rows, stage_calibrate, stage_distill,
                         stage_train_teacher, verify)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


def _select(values, chosen):
    return list(values) if chosen is None else [chosen]


def _layout(args) -> Layout:
    cfg = ExperimentConfig.load(args.config, args.set or ())
    layout = Layout(args.out, cfg)
    layout.write_config()
    return layout


def cmd_train_teacher(args) -> int:
    layout = _layout(args)
    splits = layout.cfg.splits()
    for size in _select(layout.cfg.raw["teacher_sizes"], args.size):
        for seed in _select(layout.cfg.raw["seeds"], args.seed):
            m = stage_train_teacher(layout, size, seed, splits)
            print(f"teacher size={size} seed={seed} "
                  f"val_acc={m['validation_accuracy']:.4f} test_acc={m['test_accuracy']:.4f}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    layout = _layout(args)
    for size in _select(layout.cfg.raw["teacher_sizes"], args.size):
        for seed in _select(layout.cfg.raw["seeds"], args.seed):
            stage_calibrate(layout, size, seed)
            print(f"# teacher size={size} seed={seed}")
            print((layout.calibrate(size, seed) / "table2.txt").read_text(), end="")
    return EXIT_OK


def cmd_distill(args) -> int:
    layout = _layout(args)
    splits = layout.cfg.splits()
    modes = list(distill.MODES) if args.mode is None else [args.mode]
    for size in _select(layout.cfg.raw["teacher_sizes"], args.size):
        for student in _select(layout.cfg.raw["student_sizes"], args.student):
            for seed in _select(layout.cfg.raw["seeds"], args.seed):
                for mode in modes:
                    m = stage_distill(layout, size, student, mode, seed, splits)
                    print(f"student teacher={size} student={student} mode={mode} seed={seed} "
                          f"temp={m['effective_temperature']:.4f} test_acc={m['student_acc']:.4f}")
    return EXIT_OK


def _teacher_cell(job):
    out, raw, size, seed = job
    layout = Layout(out, ExperimentConfig(raw))
    stage_train_teacher(layout, size, seed)
    stage_calibrate(layout, size, seed)


def _distill_cell(job):
    out, raw, size, student, mode, seed = job
    stage_distill(Layout(out, ExperimentConfig(raw)), size, student, mode, seed)


def _run(fn, jobs, workers):
    if workers <= 1:
        for job in jobs:
            fn(job)
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        list(pool.map(fn, jobs))


def cmd_sweep(args) -> int:
    layout = _layout(args)
    raw = layout.cfg.raw
    workers = args.jobs or os.cpu_count() or 1
    seeds = _select(raw["seeds"], args.seed)
    teacher_jobs = [(args.out, raw, size, seed) for size in raw["teacher_sizes"] for seed in seeds]
    _run(_teacher_cell, teacher_jobs, workers)
    modes = list(distill.MODES) if args.mode is None else [args.mode]
    distill_jobs = [(args.out, raw, size, student, mode, seed) for size in raw["teacher_sizes"]
                    for student in raw["student_sizes"] for mode in modes for seed in seeds]
    # completion barrier: all teachers are calibrated before any student starts
    _run(_distill_cell, distill_jobs, workers)
    return cmd_report(args, layout)


def cmd_report(args, layout=None) -> int:
    layout = layout or _layout(args)
    rows, missing = collect_rows(layout)
    if missing:
        print("incomplete sweep; missing cells:", file=sys.stderr)
        for cell in missing:
            print(f"  {cell}", file=sys.stderr)
        return EXIT_VALIDATION
    table = distill.ComparisonTable(rows)
    outputs = {
        "baseline": report.baseline_tables(table),
        "calibration": report.calibration_tables(table),
        "students": report.student_tables(table),
    }
    for name, (as_csv, as_text) in outputs.items():
        data.atomic_write(layout.root / f"{name}.csv", as_csv.encode())
        data.atomic_write(layout.root / f"{name}.txt", as_text.encode())
        print(f"== {name}\n{as_text}")
    data.atomic_write(layout.root / "sweep_rows.csv", report.rows_csv(table).encode())
    verdict = table.verdict()
    data.atomic_write(layout.root / "verdict.txt", (verdict + "\n").encode())
    print(verdict)
    return EXIT_OK


def cmd_verify(args) -> int:
    layout = _layout(args)
    problems = verify(layout)
    for p in problems:
        print(p, file=sys.stderr)
    print("verify: ok" if not problems else f"verify: {len(problems)} problem(s)")
    return EXIT_OK if not problems else EXIT_VALIDATION


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (dotted path)")
    common.add_argument("--out", default=os.environ.get("CALIKD_OUT", "runs"), help="output root (env CALIKD_OUT)")
    common.add_argument("--seed", type=int, help="restrict to one seed")

    parser = argparse.ArgumentParser(prog="calikd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-teacher", parents=[common])
    p.add_argument("--size", type=int, help="teacher hidden width (default: all)")
    p.set_defaults(func=cmd_train_teacher)

    p = sub.add_parser("calibrate", parents=[common])
    p.add_argument("--size", type=int)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("distill", parents=[common])
    p.add_argument("--size", type=int, help="teacher width")
    p.add_argument("--student", type=int, help="student width")
    p.add_argument("--mode", choices=distill.MODES, help="default: both")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("sweep", parents=[common])
    p.add_argument("--jobs", type=int, help="worker processes (default: CPU count)")
    p.add_argument("--mode", choices=distill.MODES, help="default: both")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", parents=[common])
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", parents=[common])
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ConfigurationError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc, ConfigurationError) and "calibrated" in str(exc):
            print("hint: calibrated mode reads the teacher's fit.json written by `calikd calibrate`", file=sys.stderr)
        return EXIT_VALIDATION
    except CalikdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
