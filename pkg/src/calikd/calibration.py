"""Miscalibration metrics and temperature scaling.

Temperature scaling divides a network's logits by one scalar T before the
softmax. T is chosen to minimise mean negative log-likelihood on held-out
logits; the search is a golden-section search over log T.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, ValidationError
from .nnet import log_softmax

DEFAULT_BINS = 15
DEFAULT_BOUNDS = (0.05, 20.0)
DEFAULT_TOL = 1e-4
NLL_CONVENTION = "mean-NLL"

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class LogitSet:
    logits: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.logits, dtype=np.float64)
        y = np.asarray(self.labels)
        if z.ndim != 2:
            raise ValidationError(f"logits must be a matrix, got ndim={z.ndim}")
        n, k = z.shape
        if n < 1 or k < 2:
            raise ValidationError(f"need n >= 1 and K >= 2, got n={n}, K={k}")
        if not np.isfinite(z).all():
            raise ValidationError("logits must be finite")
        if y.shape != (n,):
            raise ValidationError(f"expected {n} labels, got shape {y.shape}")
        if not np.issubdtype(y.dtype, np.integer):
            raise ValidationError("labels must be integers")
        if y.min() < 0 or y.max() >= k:
            raise ValidationError(f"labels must lie in [0, {k})")
        object.__setattr__(self, "logits", z)
        object.__setattr__(self, "labels", y.astype(np.int64))

    @property
    def n(self) -> int:
        return self.logits.shape[0]

    @property
    def class_count(self) -> int:
        return self.logits.shape[1]

    def scaled(self, c: float) -> "LogitSet":
        return LogitSet(self.logits * c, self.labels)


def _check_t(T: float) -> None:
    if not T > 0:
        raise DomainError(f"temperature must be > 0, got {T}")


def predictions(logit_set: LogitSet) -> np.ndarray:
    """Argmax of the raw logits, ties to the lowest index.

    Taken before any division so the result is exactly temperature-invariant.
    """
    return logit_set.logits.argmax(axis=1)


def calibrated_confidences(logit_set: LogitSet, T: float):
    """Return ``(confidence, predicted_class)`` arrays at temperature T."""
    _check_t(T)
    z = logit_set.logits / T
    shifted = z - z.max(axis=1, keepdims=True)
    conf = 1.0 / np.exp(shifted).sum(axis=1)
    return conf, predictions(logit_set)


def nll(logit_set: LogitSet, T: float = 1.0) -> float:
    """Mean negative log-likelihood of the true labels at temperature T."""
    _check_t(T)
    logp = log_softmax(logit_set.logits / T)
    return float(-logp[np.arange(logit_set.n), logit_set.labels].mean())


def accuracy(logit_set: LogitSet) -> float:
    return float((predictions(logit_set) == logit_set.labels).mean())


# -- reliability / ECE ------------------------------------------------------


@dataclass(frozen=True)
class Bin:
    lower: float
    upper: float
    count: int
    mean_confidence: float
    mean_accuracy: float


@dataclass(frozen=True)
class ReliabilityHistogram:
    bins: tuple

    @property
    def M(self) -> int:
        return len(self.bins)

    @property
    def n(self) -> int:
        return sum(b.count for b in self.bins)

    def rows(self) -> list:
        return [asdict(b) for b in self.bins]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bin_lower", "bin_upper", "count", "mean_confidence", "mean_accuracy"])
        for b in self.bins:
            w.writerow([repr(b.lower), repr(b.upper), b.count, repr(b.mean_confidence), repr(b.mean_accuracy)])
        return buf.getvalue()


def bin_indices(confidences, M: int) -> np.ndarray:
    """Index of the equal-width bin ``(lower, upper]`` holding each confidence."""
    edges = np.arange(M + 1) / M
    idx = np.searchsorted(edges, np.asarray(confidences, dtype=np.float64), side="left") - 1
    return np.clip(idx, 0, M - 1)


def histogram_from_confidences(confidences, correct, M: int = DEFAULT_BINS) -> ReliabilityHistogram:
    if M < 1:
        raise DomainError(f"bin count must be >= 1, got {M}")
    conf = np.asarray(confidences, dtype=np.float64)
    hit = np.asarray(correct, dtype=np.float64)
    if conf.shape != hit.shape or conf.ndim != 1:
        raise ValidationError("confidences and correctness must be equal-length vectors")
    if conf.size and (conf.min() <= 0.0 or conf.max() > 1.0):
        raise DomainError("confidences must lie in (0, 1]")
    edges = np.arange(M + 1) / M
    idx = bin_indices(conf, M)
    bins = []
    for m in range(M):
        mask = idx == m
        c = int(mask.sum())
        bins.append(Bin(
            lower=float(edges[m]),
            upper=float(edges[m + 1]),
            count=c,
            mean_confidence=float(conf[mask].mean()) if c else 0.0,
            mean_accuracy=float(hit[mask].mean()) if c else 0.0,
        ))
    return ReliabilityHistogram(tuple(bins))


def reliability_histogram(logit_set: LogitSet, T: float = 1.0, M: int = DEFAULT_BINS) -> ReliabilityHistogram:
    conf, pred = calibrated_confidences(logit_set, T)
    return histogram_from_confidences(conf, pred == logit_set.labels, M)


def ece(histogram: ReliabilityHistogram) -> float:
    """Count-weighted mean of |accuracy - confidence| over bins."""
    n = histogram.n
    if n == 0:
        raise DomainError("ECE of an empty histogram is undefined")
    return float(sum(b.count / n * abs(b.mean_accuracy - b.mean_confidence) for b in histogram.bins))


# -- temperature fit --------------------------------------------------------


@dataclass(frozen=True)
class TemperatureFit:
    temperature: float
    nll_before: float
    nll_after: float
    converged: bool
    clamped_at_bound: bool
    evaluations: int
    bounds: tuple = DEFAULT_BOUNDS
    degenerate: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["bounds"] = list(self.bounds)
        d["nll_convention"] = NLL_CONVENTION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TemperatureFit":
        fields = {k: d[k] for k in ("temperature", "nll_before", "nll_after", "converged",
                                    "clamped_at_bound", "evaluations")}
        return cls(bounds=tuple(d.get("bounds", DEFAULT_BOUNDS)),
                   degenerate=d.get("degenerate", False), **fields)


def golden_section(f, a: float, b: float, tol: float):
    """Minimise a unimodal ``f`` on ``[a, b]``.

    Shrinks the bracket until its width is at most ``tol`` and returns
    ``(x_best, f_best, evaluations)`` where ``x_best`` is the better of the
    two interior probes.
    """
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    evals = 2
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
        evals += 1
    return (c, fc, evals) if fc <= fd else (d, fd, evals)


def fit_temperature(validation: LogitSet, bounds: Sequence[float] = DEFAULT_BOUNDS,
                    tol: float = DEFAULT_TOL) -> TemperatureFit:
    """Fit T by minimising mean NLL over ``bounds`` (searched in log T).

    The returned NLL never exceeds the NLL at T = 1 as long as 1 lies in
    ``bounds``. Inputs whose rows are all constant give T = 1 with a warning.
    """
    t_min, t_max = float(bounds[0]), float(bounds[1])
    if not 0 < t_min < t_max:
        raise DomainError(f"need 0 < T_min < T_max, got {bounds}")
    if tol <= 0:
        raise DomainError("tol must be positive")
    before = nll(validation, 1.0)
    z = validation.logits
    if np.all(z.max(axis=1) == z.min(axis=1)):
        warnings.warn("every logit row is constant; NLL does not depend on T, returning T=1")
        return TemperatureFit(1.0, before, before, False, False, 1, (t_min, t_max), True)

    def objective(log_t):
        value = nll(validation, math.exp(log_t))
        if math.isnan(value):
            raise FloatingPointError(f"NLL is NaN at T={math.exp(log_t)}")
        return value

    lo, hi = math.log(t_min), math.log(t_max)
    log_t, best, evals = golden_section(objective, lo, hi, tol)
    # golden section never probes the endpoints; check them so minima at the
    # bounds are returned exactly
    candidates = [(best, log_t)]
    for edge in (lo, hi):
        if abs(log_t - edge) <= tol:
            candidates.append((objective(edge), edge))
            evals += 1
    best, log_t = min(candidates)
    temperature = math.exp(log_t)
    if t_min <= 1.0 <= t_max and best > before:
        # non-unimodal objective; fall back to the identity temperature
        best, temperature, log_t = before, 1.0, 0.0
    clamped = abs(log_t - lo) <= tol or abs(log_t - hi) <= tol
    if log_t == lo:
        temperature = t_min
    elif log_t == hi:
        temperature = t_max
    return TemperatureFit(temperature, before, best, True, clamped, evals, (t_min, t_max))


# -- report -----------------------------------------------------------------

TABLE_ROWS = ("Optimal Temp", "ECE Before", "ECE After", "NLL Before", "NLL After")


@dataclass(frozen=True)
class CalibrationReport:
    temperature: float
    ece_before: float
    ece_after: float
    nll_before: float
    nll_after: float
    accuracy: float

    def table_row(self) -> dict:
        return dict(zip(TABLE_ROWS, (self.temperature, self.ece_before, self.ece_after,
                                     self.nll_before, self.nll_after)))

    def to_dict(self) -> dict:
        return asdict(self)


def calibration_report(logit_set: LogitSet, fit: TemperatureFit, M: int = DEFAULT_BINS) -> CalibrationReport:
    T = fit.temperature
    return CalibrationReport(
        temperature=T,
        ece_before=ece(reliability_histogram(logit_set, 1.0, M)),
        ece_after=ece(reliability_histogram(logit_set, T, M)),
        nll_before=nll(logit_set, 1.0),
        nll_after=nll(logit_set, T),
        accuracy=accuracy(logit_set),
    )


def model_logits(model, dataset) -> LogitSet:
    """Convenience: evaluate ``model`` on ``dataset`` into a LogitSet."""
    from .nnet import forward

    return LogitSet(forward(model, dataset.features), np.asarray(dataset.labels))


def fit_and_report(validation: LogitSet, test: Optional[LogitSet] = None, M: int = DEFAULT_BINS,
                   bounds: Sequence[float] = DEFAULT_BOUNDS, tol: float = DEFAULT_TOL):
    fit = fit_temperature(validation, bounds, tol)
    reports = {"validation": calibration_report(validation, fit, M)}
    if test is not None:
        reports["test"] = calibration_report(test, fit, M)
    return fit, reports
