"""Datasets: seeded synthetic blobs, IDX ingestion, splitting, logits CSV."""

from __future__ import annotations

import csv
import hashlib
import io
import os
import struct
import tempfile
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .calibration import LogitSet
from .errors import ConfigurationError, FormatError, TruncationError, ValidationError
from .nnet import make_rng

SPLIT_TAGS = ("train", "validation", "test")

IDX_LABELS_MAGIC = 0x00000801
IDX_IMAGES_MAGIC = 0x00000803


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_count: int
    split_tag: Optional[str] = None
    provenance: dict = field(default_factory=dict)
    # positions in the parent dataset; lets callers check split disjointness
    indices: Optional[np.ndarray] = None
    # labels before noise injection, synthetic data only
    clean_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise ValidationError("features must be an (n, d) matrix matching the label count")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValidationError(f"labels must lie in [0, {self.class_count})")
        if not np.isfinite(self.features).all():
            raise ValidationError("feature rows must be finite")
        if self.split_tag is not None and self.split_tag not in SPLIT_TAGS:
            raise ValidationError(f"unknown split tag {self.split_tag!r}")
        if self.indices is None:
            self.indices = np.arange(len(self.labels))

    def __len__(self):
        return len(self.labels)

    @property
    def dims(self) -> int:
        return self.features.shape[1]

    def subset(self, idx, split_tag=None, **provenance) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            self.features[idx], self.labels[idx], self.class_count,
            split_tag=split_tag, provenance={**self.provenance, **provenance},
            indices=self.indices[idx],
            clean_labels=None if self.clean_labels is None else self.clean_labels[idx],
        )


@dataclass
class SyntheticSpec:
    class_count: int = 10
    dims: int = 20
    clusters_per_class: int = 2
    cluster_spread: float = 1.0
    label_noise_rate: float = 0.15
    samples: int = 3000
    seed: int = 0

    def validate(self) -> None:
        if self.class_count < 2:
            raise ValidationError("class_count must be >= 2")
        if self.dims < 1 or self.clusters_per_class < 1 or self.samples < 1:
            raise ValidationError("dims, clusters_per_class and samples must be positive")
        if not self.cluster_spread > 0:
            raise ValidationError("cluster_spread must be positive")
        if not 0.0 <= self.label_noise_rate < 0.5:
            raise ValidationError("label_noise_rate must lie in [0, 0.5)")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")


def generate_synthetic(spec: SyntheticSpec) -> Dataset:
    """Gaussian clusters around standard-normal centres, plus label noise.

    Classes are balanced. A fraction ``label_noise_rate`` of samples (each
    independently) get their label moved to a uniformly chosen other class.
    """
    spec.validate()
    rng = make_rng(spec.seed, "synthetic")
    k, c = spec.class_count, spec.clusters_per_class
    centres = rng.standard_normal((k * c, spec.dims))
    clean = rng.permutation(np.arange(spec.samples) % k)
    cluster = clean * c + rng.integers(0, c, size=spec.samples)
    x = centres[cluster] + spec.cluster_spread * rng.standard_normal((spec.samples, spec.dims))
    flip = rng.random(spec.samples) < spec.label_noise_rate
    shift = rng.integers(1, k, size=spec.samples)
    noisy = np.where(flip, (clean + shift) % k, clean)
    prov = {"generator": "gaussian-clusters", **vars(spec)}
    return Dataset(x, noisy, k, provenance=prov, clean_labels=clean)


# -- IDX --------------------------------------------------------------------


def parse_idx(payload: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX file.

    Labels (magic 0x801, one dim) come back as an int64 vector; images
    (magic 0x803, three dims) as float rows scaled to [0, 1], one per image.
    """
    if len(payload) < 4:
        raise TruncationError(f"IDX header needs 4 bytes, got {len(payload)}")
    (magic,) = struct.unpack(">I", payload[:4])
    if magic not in (IDX_LABELS_MAGIC, IDX_IMAGES_MAGIC):
        raise FormatError(f"unsupported IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(payload) < header:
        raise TruncationError(f"IDX header declares {ndim} dims but only {len(payload)} bytes present")
    dims = struct.unpack(f">{ndim}I", payload[4:header])
    if any(d == 0 for d in dims[1:]):
        raise FormatError(f"IDX dimensions {dims} contain a zero extent")
    expected = int(np.prod(dims, dtype=np.int64))
    body = len(payload) - header
    if body != expected:
        raise TruncationError(f"IDX header declares {expected} data bytes, payload has {body}")
    data = np.frombuffer(payload, dtype=np.uint8, count=expected, offset=header)
    if ndim == 1:
        return data.astype(np.int64)
    return data.reshape(dims[0], -1).astype(np.float64) / 255.0


def load_idx_dataset(images_path, labels_path, limit: Optional[int] = None) -> Dataset:
    """Image/label IDX pair as a Dataset; ``limit`` keeps the first N samples."""
    with open(images_path, "rb") as fh:
        raw_images = fh.read()
    with open(labels_path, "rb") as fh:
        raw_labels = fh.read()
    x, y = parse_idx(raw_images), parse_idx(raw_labels)
    if x.ndim != 2 or y.ndim != 1:
        raise FormatError("expected an image file (0x803) and a label file (0x801)")
    if len(x) != len(y):
        raise ValidationError(f"{len(x)} images but {len(y)} labels")
    if len(y) == 0:
        raise ValidationError("IDX files contain no samples")
    classes = max(int(y.max()) + 1, 2)
    if limit is not None:
        x, y = x[:limit], y[:limit]
    prov = {
        "generator": "idx",
        "images_sha256": hashlib.sha256(raw_images).hexdigest(),
        "labels_sha256": hashlib.sha256(raw_labels).hexdigest(),
        "limit": limit,
    }
    return Dataset(x, y, classes, provenance=prov)


# -- splitting --------------------------------------------------------------


def split(dataset: Dataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed: int = 0):
    """Seeded permutation cut into contiguous train/validation/test blocks."""
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigurationError(f"fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(dataset)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    sizes = (n_train, n_val, n - n_train - n_val)
    if min(sizes) <= 0:
        raise ConfigurationError(f"split sizes {sizes} leave a split empty (n={n})")
    perm = make_rng(seed, "split").permutation(n)
    cuts = np.cumsum(sizes)[:-1]
    return tuple(
        dataset.subset(part, split_tag=tag, split_seed=seed, split_fractions=list(fractions))
        for part, tag in zip(np.split(perm, cuts), SPLIT_TAGS)
    )


# -- logits interchange -----------------------------------------------------


def atomic_write(path, data: bytes) -> None:
    """Write via a sibling temp file and rename."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_logits(path, logit_set: LogitSet) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label"] + [f"z{k}" for k in range(logit_set.class_count)])
    for label, row in zip(logit_set.labels, logit_set.logits):
        w.writerow([int(label)] + [format(v, ".9g") for v in row])
    atomic_write(path, buf.getvalue().encode())


def read_logits(path) -> LogitSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty logits file")
    header = rows[0]
    k = len(header) - 1
    if header[0] != "label" or header[1:] != [f"z{i}" for i in range(k)] or k < 2:
        raise FormatError(f"{path}: bad header {header}")
    labels, logits = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != k + 1:
            raise FormatError(f"{path}: row {lineno} has {len(row) - 1} logit columns, expected {k}")
        try:
            label = int(row[0])
            values = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise FormatError(f"{path}: row {lineno}: {exc}") from None
        if not 0 <= label < k:
            raise ValidationError(f"{path}: row {lineno} label {label} outside [0, {k})")
        labels.append(label)
        logits.append(values)
    if not labels:
        raise FormatError(f"{path}: no data rows")
    return LogitSet(np.array(logits), np.array(labels, dtype=np.int64))
