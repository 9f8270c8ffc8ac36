"""Table rendering: CSV for machines, aligned text for people."""

from __future__ import annotations

import csv
import io

import numpy as np

from .calibration import TABLE_ROWS
from .distill import MODES, ComparisonTable


def _csv(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _aligned(rows) -> str:
    widths = [max(len(str(r[i])) for r in rows) for i in range(len(rows[0]))]
    lines = ["  ".join(str(c).rjust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _pm(mean, std, digits=4) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def table2_rows(columns: dict, fmt=lambda v: f"{v:.3f}"):
    header = [""] + list(columns)
    body = [[label] + [fmt(col[label]) if not isinstance(col[label], str) else col[label]
                       for col in columns.values()] for label in TABLE_ROWS]
    return [header] + body


def table2_csv(columns: dict) -> str:
    return _csv(table2_rows(columns, fmt=repr))


def table2_text(columns: dict) -> str:
    return _aligned(table2_rows(columns))


def _stats(values):
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


def baseline_tables(table: ComparisonTable):
    """Teacher test accuracy per size (one value per seed, deduplicated)."""
    per_size: dict = {}
    for r in table.rows:
        per_size.setdefault(r.teacher_size, {})[r.seed] = r.teacher_acc
    sizes = sorted(per_size)
    stats = [_stats(list(per_size[s].values())) for s in sizes]
    csv_rows = [["teacher_size", "mean", "std", "seeds"]] + [
        [s, repr(m), repr(sd), len(per_size[s])] for s, (m, sd) in zip(sizes, stats)]
    text_rows = [["teacher"] + [str(s) for s in sizes], ["accuracy"] + [_pm(m, sd) for m, sd in stats]]
    return _csv(csv_rows), _aligned(text_rows)


def calibration_tables(table: ComparisonTable):
    per_size: dict = {}
    for r in table.rows:
        per_size.setdefault(r.teacher_size, {})[r.seed] = (
            r.temperature, r.teacher_ece_before, r.teacher_ece_after)
    sizes = sorted(per_size)
    labels = ("Optimal Temp", "ECE Before", "ECE After")
    agg = {s: [_stats([v[i] for v in per_size[s].values()]) for i in range(3)] for s in sizes}
    csv_rows = [["metric"] + [h for s in sizes for h in (f"{s}_mean", f"{s}_std")]]
    text_rows = [[""] + [str(s) for s in sizes]]
    for i, label in enumerate(labels):
        csv_rows.append([label] + [repr(x) for s in sizes for x in agg[s][i]])
        text_rows.append([label] + [_pm(*agg[s][i], digits=3) for s in sizes])
    return _csv(csv_rows), _aligned(text_rows)


def student_tables(table: ComparisonTable):
    """Teacher rows (vanilla then calibrated) by student columns."""
    agg = table.aggregate()
    teachers = sorted({k[0] for k in agg})
    students = sorted({k[1] for k in agg})
    csv_rows = [["teacher", "mode"] + [h for s in students for h in (f"{s}_mean", f"{s}_std")]]
    text_rows = [["T \\ S"] + [str(s) for s in students]]
    for t in teachers:
        for mode in MODES:
            label = str(t) if mode == "vanilla" else f"Calibrated {t}"
            cells = [agg.get((t, s, mode)) for s in students]
            csv_rows.append([t, mode] + [repr(x) if c else "" for c in cells for x in (c or (0, 0))])
            text_rows.append([label] + [_pm(*c) if c else "-" for c in cells])
    return _csv(csv_rows), _aligned(text_rows)


def rows_csv(table: ComparisonTable) -> str:
    records = table.to_records()
    if not records:
        return ""
    keys = list(records[0])
    return _csv([keys] + [[repr(r[k]) if isinstance(r[k], float) else r[k] for k in keys] for r in records])
