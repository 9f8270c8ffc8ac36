"""Small numpy feed-forward network: ReLU MLP, softmax cross-entropy, SGD.

Everything is deterministic given a seed. Random streams come from numpy's
PCG64 bit generator keyed by ``(seed, stream-name)`` so that initialisation
and batch shuffling never share state.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import DivergedTrainingError, DomainError, ShapeError, ValidationError

PRNG_ID = "numpy.PCG64/SeedSequence"


def make_rng(seed: int, stream: str) -> np.random.Generator:
    """Independent generator for ``stream`` under ``seed``."""
    if seed < 0:
        raise ValidationError(f"seed must be non-negative, got {seed}")
    key = zlib.crc32(stream.encode())
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(key,))))


# -- softmax helpers --------------------------------------------------------


def log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise DomainError(f"temperature must be > 0, got {temperature}")


def _as_targets(targets, n: int, k: int):
    """Return ``(hard_labels, None)`` or ``(None, soft_rows)`` after validation."""
    t = np.asarray(targets)
    if t.ndim == 1:
        if t.shape[0] != n:
            raise ShapeError(f"got {t.shape[0]} labels for {n} samples")
        if not np.issubdtype(t.dtype, np.integer):
            raise ValidationError("hard labels must be integers")
        if t.size and (t.min() < 0 or t.max() >= k):
            raise ValidationError(f"labels must lie in [0, {k})")
        return t, None
    if t.shape != (n, k):
        raise ShapeError(f"soft targets have shape {t.shape}, expected {(n, k)}")
    t = t.astype(np.float64)
    if np.any(t < 0) or np.any(np.abs(t.sum(axis=1) - 1.0) > 1e-6):
        raise ValidationError("soft target rows must be non-negative and sum to 1 within 1e-6")
    return None, t


def softmax_cross_entropy(logits: np.ndarray, targets, temperature: float = 1.0):
    """Mean cross-entropy of ``softmax(logits / temperature)`` against targets.

    ``targets`` is either a vector of class indices or a matrix of probability
    rows. Returns ``(loss, dloss/dlogits)``.
    """
    _check_temperature(temperature)
    z = np.asarray(logits, dtype=np.float64)
    n, k = z.shape
    hard, soft = _as_targets(targets, n, k)
    logp = log_softmax(z / temperature)
    p = np.exp(logp)
    if hard is not None:
        rows = np.arange(n)
        loss = -logp[rows, hard].mean()
        grad = p
        grad[rows, hard] -= 1.0
    else:
        loss = -(soft * logp).sum(axis=1).mean()
        grad = p - soft
    grad /= temperature * n
    return float(loss), grad


# -- model ------------------------------------------------------------------


class Gradients(NamedTuple):
    weights: list
    biases: list


@dataclass
class MlpModel:
    """ReLU MLP. ``weights[l]`` has shape ``(dims[l], dims[l + 1])``."""

    weights: list
    biases: list

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise ShapeError("need one weight matrix and one bias vector per layer")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {i}: weight {w.shape} and bias {b.shape} disagree")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ShapeError(
                    f"layer {i} expects input dim {w.shape[0]}, "
                    f"previous layer emits {self.weights[i - 1].shape[1]}"
                )
        if self.weights[-1].shape[1] < 2:
            raise ShapeError("output layer must have at least 2 classes")

    @classmethod
    def init(cls, layer_dims: Sequence[int], seed: int) -> "MlpModel":
        """He-normal weights (std sqrt(2/fan_in)), zero biases."""
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ValidationError(f"invalid layer dims {dims}")
        rng = make_rng(seed, "init")
        weights = [rng.standard_normal((a, b)) * math.sqrt(2.0 / a) for a, b in zip(dims, dims[1:])]
        biases = [np.zeros(b) for b in dims[1:]]
        return cls(weights, biases)

    @property
    def layer_dims(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def class_count(self) -> int:
        return self.weights[-1].shape[1]

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def parameters(self) -> list:
        return self.weights + self.biases

    def is_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.parameters())

    def equals(self, other: "MlpModel") -> bool:
        """Bitwise parameter equality."""
        mine, theirs = self.parameters(), other.parameters()
        return len(mine) == len(theirs) and all(
            a.shape == b.shape and np.array_equal(a, b) for a, b in zip(mine, theirs)
        )


def _check_inputs(model: MlpModel, inputs) -> np.ndarray:
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"inputs must be a matrix, got ndim={x.ndim}")
    if x.shape[1] != model.layer_dims[0]:
        raise ShapeError(f"input width {x.shape[1]} != model input dim {model.layer_dims[0]}")
    return x


def _forward_cache(model: MlpModel, x: np.ndarray) -> list:
    acts = [x]
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = acts[-1] @ w + b
        acts.append(h if i == last else np.maximum(h, 0.0))
    return acts


def forward(model: MlpModel, inputs) -> np.ndarray:
    """Raw logits, shape ``(n, K)``."""
    return _forward_cache(model, _check_inputs(model, inputs))[-1]


def backward(model: MlpModel, acts: list, dlogits: np.ndarray) -> Gradients:
    """Backpropagate ``dL/dlogits`` through cached activations."""
    gw, gb = [], []
    delta = dlogits
    for i in range(len(model.weights) - 1, -1, -1):
        gw.append(acts[i].T @ delta)
        gb.append(delta.sum(axis=0))
        if i:
            delta = (delta @ model.weights[i].T) * (acts[i] > 0)
    return Gradients(gw[::-1], gb[::-1])


def loss_and_grad(model: MlpModel, inputs, targets, temperature: float = 1.0):
    """Cross-entropy loss and exact parameter gradients.

    Targets may be hard labels or soft probability rows; the prediction is
    ``softmax(logits / temperature)``.
    """
    x = _check_inputs(model, inputs)
    acts = _forward_cache(model, x)
    loss, dz = softmax_cross_entropy(acts[-1], targets, temperature)
    return loss, backward(model, acts, dz)


def sgd_step(model: MlpModel, grads: Gradients, lr: float, velocity: Optional[Gradients] = None,
             momentum: float = 0.0):
    """One heavy-ball step: ``v <- momentum*v + g``; ``p <- p - lr*v``.

    Returns ``(new_model, new_velocity)``; inputs are left untouched.
    """
    if len(grads.weights) != len(model.weights) or len(grads.biases) != len(model.biases):
        raise ShapeError("gradient layer count does not match model")
    for p, g in zip(model.parameters(), grads.weights + grads.biases):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
    if velocity is None:
        velocity = Gradients([np.zeros_like(w) for w in model.weights],
                             [np.zeros_like(b) for b in model.biases])
    vw = [momentum * v + g for v, g in zip(velocity.weights, grads.weights)]
    vb = [momentum * v + g for v, g in zip(velocity.biases, grads.biases)]
    new = MlpModel([w - lr * v for w, v in zip(model.weights, vw)],
                   [b - lr * v for b, v in zip(model.biases, vb)])
    return new, Gradients(vw, vb)


def cosine_lr(epoch: int, max_epochs: int, initial_lr: float) -> float:
    if max_epochs < 1:
        raise DomainError(f"max_epochs must be >= 1, got {max_epochs}")
    if not 0 <= epoch <= max_epochs:
        raise DomainError(f"epoch {epoch} outside [0, {max_epochs}]")
    return initial_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / max_epochs))


# -- training ---------------------------------------------------------------


@dataclass
class TrainConfig:
    batch_size: int = 128
    initial_lr: float = 0.1
    max_epochs: int = 60
    momentum: float = 0.9
    seed: int = 0
    shuffle: bool = True

    def validate(self, n_train: Optional[int] = None) -> None:
        if self.batch_size < 1:
            raise ValidationError("batch_size must be positive")
        if n_train is not None and self.batch_size > n_train:
            raise ValidationError(f"batch_size {self.batch_size} exceeds training-set size {n_train}")
        if self.initial_lr < 0 or not math.isfinite(self.initial_lr):
            raise ValidationError("initial_lr must be a finite non-negative number")
        if self.max_epochs < 1:
            raise ValidationError("max_epochs must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValidationError("momentum must lie in [0, 1)")
        if self.seed < 0:
            raise ValidationError("seed must be non-negative")


@dataclass
class TrainTrace:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


# objective(logits, batch_indices, batch_inputs) -> (loss, dloss/dlogits)
BatchObjective = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple]


def fit(model: MlpModel, features, labels, config: TrainConfig, objective: BatchObjective,
        metadata: Optional[dict] = None):
    """Generic minibatch SGD loop shared by plain training and distillation.

    Learning rate follows the cosine schedule evaluated at the epoch index.
    Accuracy in the trace is measured on the training batches as they pass.
    """
    x = _check_inputs(model, features)
    y = np.asarray(labels)
    n = x.shape[0]
    if n == 0:
        raise ValidationError("empty training set")
    config.validate(n)
    rng = make_rng(config.seed, "shuffle")
    trace = TrainTrace(metadata={"prng": PRNG_ID, **(metadata or {})})
    velocity = None
    current = model.copy()
    for epoch in range(config.max_epochs):
        lr = cosine_lr(epoch, config.max_epochs, config.initial_lr)
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total_loss, correct = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = x[idx]
            acts = _forward_cache(current, xb)
            loss, dz = objective(acts[-1], idx, xb)
            if not math.isfinite(loss):
                raise DivergedTrainingError(epoch, loss)
            grads = backward(current, acts, dz)
            current, velocity = sgd_step(current, grads, lr, velocity, config.momentum)
            total_loss += loss * len(idx)
            correct += int((acts[-1].argmax(axis=1) == y[idx]).sum())
        epoch_loss = total_loss / n
        if not math.isfinite(epoch_loss) or not current.is_finite():
            raise DivergedTrainingError(epoch, epoch_loss)
        trace.loss.append(epoch_loss)
        trace.accuracy.append(correct / n)
        trace.lr.append(lr)
    return current, trace


def train(model: MlpModel, dataset, config: TrainConfig, soft_targets=None, temperature: float = 1.0):
    """Train on ``dataset`` (anything with ``features`` and ``labels``).

    Hard labels are used unless ``soft_targets`` rows are given. Returns a new
    model and its :class:`TrainTrace`; ``model`` itself is not modified.
    """
    _check_temperature(temperature)
    labels = np.asarray(dataset.labels)
    targets = labels if soft_targets is None else np.asarray(soft_targets, dtype=np.float64)
    _as_targets(targets, len(labels), model.class_count)

    def objective(logits, idx, _xb):
        return softmax_cross_entropy(logits, targets[idx], temperature)

    mode = "hard" if soft_targets is None else "soft"
    return fit(model, dataset.features, labels, config, objective,
               metadata={"targets": mode, "temperature": temperature})


def accuracy(model: MlpModel, dataset) -> float:
    pred = forward(model, dataset.features).argmax(axis=1)
    return float((pred == np.asarray(dataset.labels)).mean())
