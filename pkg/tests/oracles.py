"""Reference computations kept independent of the package internals."""

import math

import numpy as np
from scipy.special import logsumexp


def central_difference(f, params, h=1e-4):
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of ``params`` (mutated in place, restored)."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = p[i]
            p[i] = old + h
            up = f()
            p[i] = old - h
            down = f()
            p[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def mean_nll(logits, labels, T):
    z = np.asarray(logits) / T
    return float(np.mean(logsumexp(z, axis=1) - z[np.arange(len(labels)), labels]))


def grid_temperature(logits, labels, bounds=(0.05, 20.0), points=20_000, chunk=256):
    """Exhaustive minimiser of mean NLL over a log-spaced temperature grid.

    Uses lse(z/T) = max(z)/T + log sum exp((z - max z)/T), so the per-row max
    is taken once instead of once per grid point.
    """
    grid = np.exp(np.linspace(math.log(bounds[0]), math.log(bounds[1]), points))
    z = np.asarray(logits, dtype=np.float64)
    top = z.max(axis=1)
    below = z - top[:, None]
    gap = (z[np.arange(len(labels)), labels] - top).mean()
    inv = 1.0 / grid
    values = np.empty(points)
    for start in range(0, points, chunk):
        scale = inv[start:start + chunk]
        sums = np.exp(below[None] * scale[:, None, None]).sum(axis=2)
        values[start:start + chunk] = np.log(sums).mean(axis=1) - gap * scale
    return float(grid[np.argmin(values)])


def brute_force_ece(confidences, correct, M):
    """Loop over bins and samples with explicit ``lower < c <= upper`` tests."""
    n = len(confidences)
    total = 0.0
    counts = []
    for m in range(M):
        lower, upper = m / M, (m + 1) / M
        members = [i for i in range(n) if (lower < confidences[i] <= upper) or (m == 0 and confidences[i] <= 0)]
        counts.append(len(members))
        if members:
            conf = sum(confidences[i] for i in members) / len(members)
            acc = sum(correct[i] for i in members) / len(members)
            total += len(members) / n * abs(acc - conf)
    return total, counts


def kl(p, q):
    return sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)
