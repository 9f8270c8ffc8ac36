"""Knowledge distillation with raw or calibrated teacher temperatures.

The objective is the usual Hinton blend

    alpha * temp**2 * KL(softmax(z_t/temp) || softmax(z_s/temp))
        + (1 - alpha) * CE(labels, softmax(z_s))

In ``vanilla`` mode ``temp`` is a hand-picked constant; in ``calibrated`` mode
it is the temperature fitted to the teacher's validation logits.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import calibration
from .errors import ConfigurationError, DomainError, ShapeError, ValidationError
from .nnet import MlpModel, TrainConfig, accuracy, fit, forward, log_softmax, softmax_cross_entropy, train

MODES = ("vanilla", "calibrated")
KD_LOSS_FORM = "alpha*temp^2*KL(teacher||student) + (1-alpha)*CE(labels, student@T=1)"


@dataclass
class DistillConfig:
    alpha: float = 0.8
    kd_temperature: float = 4.0
    mode: str = "vanilla"
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.kd_temperature > 0:
            raise ValidationError(f"kd_temperature must be > 0, got {self.kd_temperature}")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")

    def effective_temperature(self, fit: Optional[calibration.TemperatureFit]) -> float:
        if self.mode == "vanilla":
            return self.kd_temperature
        if fit is None:
            raise ConfigurationError("calibrated mode needs a TemperatureFit; run calibration first")
        return fit.temperature


def kd_loss_and_grad(student_logits, teacher_logits, labels, temp: float, alpha: float):
    """Distillation loss and its gradient with respect to the student logits."""
    zs = np.asarray(student_logits, dtype=np.float64)
    zt = np.asarray(teacher_logits, dtype=np.float64)
    if zs.shape != zt.shape or zs.ndim != 2:
        raise ShapeError(f"student logits {zs.shape} and teacher logits {zt.shape} differ")
    if not temp > 0:
        raise DomainError(f"temperature must be > 0, got {temp}")
    if not 0.0 <= alpha <= 1.0:
        raise DomainError(f"alpha must lie in [0, 1], got {alpha}")
    hard_loss, hard_grad = softmax_cross_entropy(zs, labels, 1.0)
    if alpha == 0.0:
        return hard_loss, hard_grad
    log_pt = log_softmax(zt / temp)
    pt = np.exp(log_pt)
    log_ps = log_softmax(zs / temp)
    kl = float((pt * (log_pt - log_ps)).sum(axis=1).mean())
    # d CE(pt, ps)/dzs == d KL/dzs since H(pt) does not depend on zs
    _, soft_grad = softmax_cross_entropy(zs, pt, temp)
    scale = temp * temp
    loss = alpha * scale * kl + (1.0 - alpha) * hard_loss
    grad = alpha * scale * soft_grad + (1.0 - alpha) * hard_grad
    return loss, grad


def kd_loss(student_logits, teacher_logits, labels, temp: float, alpha: float) -> float:
    return kd_loss_and_grad(student_logits, teacher_logits, labels, temp, alpha)[0]


def distill_student(student: MlpModel, teacher: MlpModel, dataset, config: DistillConfig,
                    fit_result: Optional[calibration.TemperatureFit] = None):
    """Train ``student`` against the frozen ``teacher``; returns (model, trace)."""
    config.validate()
    temp = config.effective_temperature(fit_result)
    if teacher.layer_dims[0] != student.layer_dims[0] or teacher.class_count != student.class_count:
        raise ShapeError(f"teacher dims {teacher.layer_dims} incompatible with student {student.layer_dims}")
    labels = np.asarray(dataset.labels)
    frozen = teacher.copy()

    def objective(logits, idx, xb):
        return kd_loss_and_grad(logits, forward(frozen, xb), labels[idx], temp, config.alpha)

    meta = {
        "mode": config.mode,
        "effective_temperature": temp,
        "kd_temperature": config.kd_temperature,
        "alpha": config.alpha,
        "kd_loss_form": KD_LOSS_FORM,
    }
    return fit(student, dataset.features, labels, config.train, objective, metadata=meta)


# -- teacher-size sweep -----------------------------------------------------


def mlp_dims(input_dim: int, width: int, depth: int, classes: int) -> list:
    return [input_dim] + [width] * depth + [classes]


@dataclass
class SweepRow:
    teacher_size: int
    student_size: int
    seed: int
    mode: str
    teacher_acc: float
    teacher_ece_before: float
    teacher_ece_after: float
    temperature: float
    effective_temperature: float
    student_acc: float


def _mean_std(values):
    a = np.asarray(values, dtype=np.float64)
    return float(a.mean()), float(a.std(ddof=1)) if len(a) > 1 else 0.0


@dataclass
class ComparisonTable:
    rows: list

    def cells(self) -> dict:
        """``{(teacher, student, mode): [student_acc per seed]}``."""
        out: dict = {}
        for r in self.rows:
            out.setdefault((r.teacher_size, r.student_size, r.mode), []).append(r.student_acc)
        return out

    def aggregate(self) -> dict:
        return {key: _mean_std(v) for key, v in sorted(self.cells().items())}

    def dominance_by_teacher(self) -> dict:
        """Teacher size -> calibrated mean >= vanilla mean for every student."""
        agg = self.aggregate()
        out: dict = {}
        for (t, s, mode), (mean, _) in agg.items():
            if mode != "calibrated" or (t, s, "vanilla") not in agg:
                continue
            ok = mean >= agg[(t, s, "vanilla")][0]
            out[t] = out.get(t, True) and ok
        return out

    def monotone_calibrated(self) -> bool:
        """Calibrated-mode mean accuracy is non-decreasing in teacher size."""
        agg = self.aggregate()
        for s in sorted({k[1] for k in agg}):
            series = [agg[(t, s2, m)][0] for (t, s2, m) in sorted(agg) if s2 == s and m == "calibrated"]
            if any(b < a for a, b in zip(series, series[1:])):
                return False
        return True

    def paired_win_fraction(self) -> float:
        """Fraction of (teacher, student, seed) cells with calibrated >= vanilla."""
        pairs: dict = {}
        for r in self.rows:
            pairs.setdefault((r.teacher_size, r.student_size, r.seed), {})[r.mode] = r.student_acc
        full = [p for p in pairs.values() if len(p) == 2]
        if not full:
            return float("nan")
        return sum(p["calibrated"] >= p["vanilla"] for p in full) / len(full)

    def verdict(self) -> str:
        dom = self.dominance_by_teacher()
        return (f"calibrated_dominates={str(bool(dom) and all(dom.values())).lower()} "
                f"monotone_calibrated={str(self.monotone_calibrated()).lower()}")

    def to_records(self) -> list:
        return [asdict(r) for r in self.rows]


def train_teacher(size: int, depth: int, train_split, config: TrainConfig):
    dims = mlp_dims(train_split.dims, size, depth, train_split.class_count)
    return train(MlpModel.init(dims, config.seed), train_split, config)


def _sweep_cell(args):
    size, seed, student_sizes, splits, train_config, distill_config, teacher_depth, student_depth, bins, bounds = args
    train_split, val_split, test_split = splits
    tcfg = TrainConfig(**{**asdict(train_config), "seed": seed})
    teacher, _ = train_teacher(size, teacher_depth, train_split, tcfg)
    val = calibration.model_logits(teacher, val_split)
    fit_result = calibration.fit_temperature(val, bounds)
    report = calibration.calibration_report(val, fit_result, bins)
    teacher_acc = accuracy(teacher, test_split)
    rows = []
    for s in student_sizes:
        dims = mlp_dims(train_split.dims, s, student_depth, train_split.class_count)
        for mode in MODES:
            cfg = DistillConfig(distill_config.alpha, distill_config.kd_temperature, mode, tcfg)
            student, trace = distill_student(MlpModel.init(dims, seed), teacher, train_split, cfg, fit_result)
            rows.append(SweepRow(size, s, seed, mode, teacher_acc, report.ece_before, report.ece_after,
                                 fit_result.temperature, trace.metadata["effective_temperature"],
                                 accuracy(student, test_split)))
    return rows


def teacher_size_sweep(sizes: Sequence[int], student_size, splits, train_config: TrainConfig,
                       distill_config: DistillConfig, seeds: Sequence[int], teacher_depth: int = 1,
                       student_depth: int = 1, bins: int = calibration.DEFAULT_BINS,
                       bounds=calibration.DEFAULT_BOUNDS, jobs: int = 1) -> ComparisonTable:
    """Train, calibrate and distill from each teacher width, for every seed.

    ``splits`` is ``(train, validation, test)``. Temperatures are fitted on
    validation logits, accuracies are measured on test. ``student_size`` may be
    a single width or a sequence of widths.
    """
    if list(sizes) != sorted(sizes) or not sizes:
        raise ValidationError("teacher sizes must be a non-empty ascending sequence")
    if not seeds:
        raise ValidationError("need at least one seed")
    students = [student_size] if np.isscalar(student_size) else list(student_size)
    tasks = [(size, seed, students, splits, train_config, distill_config, teacher_depth,
              student_depth, bins, tuple(bounds)) for size in sizes for seed in seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_cell, tasks))
    else:
        results = [_sweep_cell(t) for t in tasks]
    return ComparisonTable([row for rows in results for row in rows])
