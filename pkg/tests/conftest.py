"""Shared helpers for the test suite: finite differences and grid builders."""

import numpy as np

from qmil.aggregate import InstanceGrid

FD_STEP = 1e-5


def central_difference(fn, x, step=FD_STEP):
    """Central finite-difference gradient of a scalar function at x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn(x)
        flat[i] = orig - step
        down = fn(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def separated_values(rng, n, low=0.05, high=0.95, jitter=None):
    """Random values with guaranteed pairwise gaps, safe for sort-based FD."""
    base = np.linspace(low, high, n)
    if jitter is None:
        jitter = (high - low) / max(n - 1, 1) / 8.0
    values = base + rng.uniform(-jitter, jitter, size=n)
    return rng.permutation(values)


def random_grid(rng, shape, num_classes, min_foreground=1, separated=False):
    """InstanceGrid with random per-instance values and a random mask.

    With separated=True every class column has well-separated values so that
    small perturbations cannot reorder the sort (tie-free for FD checks).
    """
    h, w = shape
    n = h * w
    mask = rng.uniform(size=n) < 0.7
    while mask.sum() < min_foreground:
        mask[rng.integers(n)] = True
    if separated:
        probs = np.stack(
            [separated_values(rng, n) for _ in range(num_classes)], axis=1
        )
    else:
        raw = rng.uniform(0.05, 1.0, size=(n, num_classes))
        probs = raw / raw.sum(axis=1, keepdims=True)
    return InstanceGrid(probs.astype(np.float64), mask, (h, w))
