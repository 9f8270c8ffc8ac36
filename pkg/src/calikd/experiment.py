"""Experiment configuration, artifact layout and the pipeline stages.

Layout under the output root::

    <out>/<digest>/config.json
    <out>/<digest>/teacher/<size>-base-<seed>/     model, logits, metrics
    <out>/<digest>/calibrate/<size>-base-<seed>/   fit, before/after report, reliability CSVs
    <out>/<digest>/distill/<size>x<student>-<mode>-<seed>/
    <out>/<digest>/*.csv|*.txt                     aggregated reports

Every cell directory holds a ``run.json`` record listing the sha256 of each
artifact it wrote. Only ``run.json`` carries timestamps; all other files are
byte-for-byte reproducible.
"""

from __future__ import annotations

import copy
import datetime as _dt
import hashlib
import io
import json
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
import numpy as np

from . import __version__, calibration, data, distill, nnet
from .errors import ConfigurationError, ValidationError

DEFAULT_CONFIG = {
    "data": {
        "kind": "synthetic",
        "class_count": 10,
        "dims": 20,
        "clusters_per_class": 2,
        "cluster_spread": 0.6,
        "label_noise_rate": 0.15,
        "samples": 4000,
        "seed": 0,
    },
    "split": {"fractions": [0.8, 0.1, 0.1], "seed": 0},
    "teacher_sizes": [32, 256, 2048],
    "teacher_depth": 1,
    "student_sizes": [16],
    "student_depth": 1,
    "train": asdict(nnet.TrainConfig()),
    "distill": {"alpha": 0.8, "kd_temperature": 4.0},
    "seeds": [0, 1, 2, 3, 4],
    "bins": calibration.DEFAULT_BINS,
    "bounds": list(calibration.DEFAULT_BOUNDS),
    "tol": calibration.DEFAULT_TOL,
}


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) and key != "data":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def apply_override(cfg: dict, assignment: str) -> dict:
    """Apply ``a.b.c=value``; value parsed as JSON when possible."""
    if "=" not in assignment:
        raise ConfigurationError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = copy.deepcopy(cfg)
    node = out
    parts = key.split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            node[part] = {}
        node = node[part]
    node[parts[-1]] = value
    return out


@dataclass
class ExperimentConfig:
    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG))

    @classmethod
    def load(cls, path=None, overrides=()) -> "ExperimentConfig":
        cfg = copy.deepcopy(DEFAULT_CONFIG)
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise ValidationError(f"config file not found: {p}")
            try:
                cfg = _merge(cfg, json.loads(p.read_text()))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{p}: invalid JSON ({exc})") from None
        for assignment in overrides:
            cfg = apply_override(cfg, assignment)
        out = cls(cfg)
        out.validate()
        return out

    def validate(self) -> None:
        r = self.raw
        if not r["teacher_sizes"] or not r["seeds"] or not r["student_sizes"]:
            raise ValidationError("teacher_sizes, student_sizes and seeds must be non-empty")
        if list(r["teacher_sizes"]) != sorted(r["teacher_sizes"]):
            raise ValidationError("teacher_sizes must be ascending")
        kind = r["data"].get("kind")
        if kind == "idx":
            for key in ("images", "labels"):
                path = r["data"].get(key)
                if not path or not Path(path).exists():
                    raise ValidationError(f"dataset {key} file not found: {path}")
        elif kind == "synthetic":
            self.synthetic_spec().validate()
        else:
            raise ValidationError(f"unknown data kind {kind!r}")
        self.train_config(0).validate()
        self.distill_config("vanilla").validate()

    @property
    def digest(self) -> str:
        canonical = json.dumps(self.raw, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    def synthetic_spec(self) -> data.SyntheticSpec:
        fields = {k: v for k, v in self.raw["data"].items() if k != "kind"}
        try:
            return data.SyntheticSpec(**fields)
        except TypeError as exc:
            raise ValidationError(f"bad synthetic data spec: {exc}") from None

    def train_config(self, seed: int) -> nnet.TrainConfig:
        return nnet.TrainConfig(**{**self.raw["train"], "seed": int(seed)})

    def distill_config(self, mode: str, seed: int = 0) -> distill.DistillConfig:
        d = self.raw["distill"]
        return distill.DistillConfig(float(d["alpha"]), float(d["kd_temperature"]), mode, self.train_config(seed))

    def splits(self):
        d = self.raw["data"]
        if d["kind"] == "idx":
            dataset = data.load_idx_dataset(d["images"], d["labels"], d.get("limit"))
        else:
            dataset = data.generate_synthetic(self.synthetic_spec())
        s = self.raw["split"]
        return data.split(dataset, tuple(s["fractions"]), int(s["seed"]))


# -- artifact helpers -------------------------------------------------------

_ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_model(path, model: nnet.MlpModel) -> None:
    """npz-compatible archive with fixed member timestamps (reproducible bytes)."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        arrays = {f"w{i}": w for i, w in enumerate(model.weights)}
        arrays.update({f"b{i}": b for i, b in enumerate(model.biases)})
        for name, arr in arrays.items():
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", _ZIP_EPOCH), member.getvalue())
    data.atomic_write(path, buf.getvalue())


def load_model(path) -> nnet.MlpModel:
    with np.load(path, allow_pickle=False) as npz:
        layers = len([k for k in npz.files if k.startswith("w")])
        return nnet.MlpModel([npz[f"w{i}"] for i in range(layers)], [npz[f"b{i}"] for i in range(layers)])


def write_json(path, obj) -> None:
    data.atomic_write(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def read_json(path):
    return json.loads(Path(path).read_text())


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


def write_run_record(cell: Path, cfg: ExperimentConfig, stage: str, started: str, extra=None) -> None:
    artifacts = {p.name: sha256_file(p) for p in sorted(cell.iterdir())
                 if p.is_file() and p.name != "run.json" and not p.name.startswith(".tmp-")}
    record = {
        "config_digest": cfg.digest,
        "stage": stage,
        "artifacts": artifacts,
        "started": started,
        "finished": _now(),
        "library_version": __version__,
        "prng": nnet.PRNG_ID,
        "nll_convention": calibration.NLL_CONVENTION,
        "data_provenance": _jsonable(extra or {}),
    }
    write_json(cell / "run.json", record)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


class Layout:
    def __init__(self, out, cfg: ExperimentConfig):
        self.cfg = cfg
        self.root = Path(out) / cfg.digest

    def teacher(self, size, seed) -> Path:
        return self.root / "teacher" / f"{size}-base-{seed}"

    def calibrate(self, size, seed) -> Path:
        return self.root / "calibrate" / f"{size}-base-{seed}"

    def distill(self, size, student, mode, seed) -> Path:
        return self.root / "distill" / f"{size}x{student}-{mode}-{seed}"

    def write_config(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        write_json(self.root / "config.json", self.cfg.raw)


# -- stages -----------------------------------------------------------------


def stage_train_teacher(layout: Layout, size: int, seed: int, splits=None) -> dict:
    cfg = layout.cfg
    started = _now()
    train_split, val_split, test_split = splits or cfg.splits()
    model, trace = distill.train_teacher(size, cfg.raw["teacher_depth"], train_split, cfg.train_config(seed))
    cell = layout.teacher(size, seed)
    cell.mkdir(parents=True, exist_ok=True)
    save_model(cell / "model.npz", model)
    val = calibration.model_logits(model, val_split)
    test = calibration.model_logits(model, test_split)
    data.write_logits(cell / "logits_validation.csv", val)
    data.write_logits(cell / "logits_test.csv", test)
    metrics = {
        "teacher_size": size,
        "seed": seed,
        "validation_accuracy": calibration.accuracy(val),
        "test_accuracy": calibration.accuracy(test),
        "trace": {"loss": trace.loss, "accuracy": trace.accuracy, "lr": trace.lr},
    }
    write_json(cell / "metrics.json", metrics)
    write_run_record(cell, cfg, "train-teacher", started, train_split.provenance)
    return metrics


def stage_calibrate(layout: Layout, size: int, seed: int) -> dict:
    cfg = layout.cfg
    started = _now()
    src = layout.teacher(size, seed)
    for name in ("logits_validation.csv", "logits_test.csv"):
        if not (src / name).exists():
            raise ValidationError(f"missing teacher artifact {src / name}; run train-teacher first")
    val = data.read_logits(src / "logits_validation.csv")
    test = data.read_logits(src / "logits_test.csv")
    bins = int(cfg.raw["bins"])
    fit_result, reports = calibration.fit_and_report(val, test, bins, tuple(cfg.raw["bounds"]), float(cfg.raw["tol"]))
    cell = layout.calibrate(size, seed)
    cell.mkdir(parents=True, exist_ok=True)
    write_json(cell / "fit.json", {**fit_result.to_dict(), "fit_split": "validation"})
    write_json(cell / "report.json", {split: r.to_dict() for split, r in reports.items()})
    columns = {f"{size} ({split})": r.table_row() for split, r in reports.items()}
    from .report import table2_csv, table2_text

    data.atomic_write(cell / "table2.csv", table2_csv(columns).encode())
    data.atomic_write(cell / "table2.txt", table2_text(columns).encode())
    for split, ls in (("validation", val), ("test", test)):
        for tag, T in (("T1", 1.0), ("Tfit", fit_result.temperature)):
            hist = calibration.reliability_histogram(ls, T, bins)
            data.atomic_write(cell / f"reliability_{split}_{tag}.csv", hist.to_csv().encode())
    write_run_record(cell, cfg, "calibrate", started)
    return {"fit": fit_result, "reports": reports}


def stage_distill(layout: Layout, size: int, student: int, mode: str, seed: int, splits=None) -> dict:
    cfg = layout.cfg
    started = _now()
    tdir = layout.teacher(size, seed)
    if not (tdir / "model.npz").exists():
        raise ValidationError(f"missing teacher model {tdir / 'model.npz'}; run train-teacher first")
    fit_result = None
    if mode == "calibrated":
        fit_path = layout.calibrate(size, seed) / "fit.json"
        if not fit_path.exists():
            raise ConfigurationError(
                f"calibrated mode needs {fit_path}; run `calikd calibrate --size {size} --seed {seed}` first")
        fit_result = calibration.TemperatureFit.from_dict(read_json(fit_path))
    teacher = load_model(tdir / "model.npz")
    train_split, _, test_split = splits or cfg.splits()
    dims = distill.mlp_dims(train_split.dims, student, cfg.raw["student_depth"], train_split.class_count)
    dcfg = cfg.distill_config(mode, seed)
    model, trace = distill.distill_student(nnet.MlpModel.init(dims, seed), teacher, train_split, dcfg, fit_result)
    cell = layout.distill(size, student, mode, seed)
    cell.mkdir(parents=True, exist_ok=True)
    save_model(cell / "model.npz", model)
    test = calibration.model_logits(model, test_split)
    data.write_logits(cell / "logits_test.csv", test)
    metrics = {
        "teacher_size": size,
        "student_size": student,
        "seed": seed,
        "mode": mode,
        "student_acc": calibration.accuracy(test),
        **trace.metadata,
        "trace": {"loss": trace.loss, "accuracy": trace.accuracy, "lr": trace.lr},
    }
    write_json(cell / "metrics.json", metrics)
    write_run_record(cell, cfg, "distill", started)
    return metrics


def collect_rows(layout: Layout):
    """Build sweep rows from artifacts; returns ``(rows, missing_cells)``."""
    cfg = layout.cfg.raw
    rows, missing = [], []
    for size in cfg["teacher_sizes"]:
        for seed in cfg["seeds"]:
            t = layout.teacher(size, seed) / "metrics.json"
            c = layout.calibrate(size, seed) / "report.json"
            f = layout.calibrate(size, seed) / "fit.json"
            for p in (t, c, f):
                if not p.exists():
                    missing.append(str(p.parent.relative_to(layout.root)))
            if not (t.exists() and c.exists() and f.exists()):
                continue
            teacher = read_json(t)
            report = read_json(c)["validation"]
            temperature = read_json(f)["temperature"]
            for student in cfg["student_sizes"]:
                for mode in distill.MODES:
                    d = layout.distill(size, student, mode, seed) / "metrics.json"
                    if not d.exists():
                        missing.append(str(d.parent.relative_to(layout.root)))
                        continue
                    m = read_json(d)
                    rows.append(distill.SweepRow(
                        size, student, seed, mode, teacher["test_accuracy"], report["ece_before"],
                        report["ece_after"], temperature, m["effective_temperature"], m["student_acc"]))
    return rows, sorted(set(missing))


def verify(layout: Layout, atol: float = 1e-12) -> list:
    """Recompute calibration metrics from stored logits; list mismatches."""
    cfg = layout.cfg.raw
    problems = []
    for size in cfg["teacher_sizes"]:
        for seed in cfg["seeds"]:
            tdir, cdir = layout.teacher(size, seed), layout.calibrate(size, seed)
            if not (cdir / "report.json").exists():
                problems.append(f"{cdir}: missing report.json")
                continue
            fit_t = read_json(cdir / "fit.json")["temperature"]
            stored = read_json(cdir / "report.json")
            for split in stored:
                ls = data.read_logits(tdir / f"logits_{split}.csv")
                recomputed = calibration.calibration_report(ls, calibration.TemperatureFit(
                    fit_t, 0.0, 0.0, True, False, 0), int(cfg["bins"])).to_dict()
                for key, value in recomputed.items():
                    if abs(value - stored[split][key]) > atol:
                        problems.append(f"{cdir}/{split}: {key} stored {stored[split][key]!r} != {value!r}")
            record = tdir / "run.json"
            if record.exists():
                for name, digest in read_json(record)["artifacts"].items():
                    if sha256_file(tdir / name) != digest:
                        problems.append(f"{tdir / name}: sha256 differs from run.json")
    return problems
