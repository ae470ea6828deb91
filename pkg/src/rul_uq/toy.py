"""One-dimensional regression problems with known noise, for sanity checks."""

from __future__ import annotations

import numpy as np

from .data import TrainingData


def true_sigma(x) -> np.ndarray:
    """Noise standard deviation of the sine problem: 0.1 + 0.2 |x|."""
    return 0.1 + 0.2 * np.abs(np.asarray(x, dtype=np.float64))


def sine_data(n: int, rng: np.random.Generator, low: float = -3.0, high: float = 3.0):
    """y = sin(x) + sigma(x) * eps with x uniform on [low, high]. Returns (x (n, 1), y (n,))."""
    x = rng.uniform(low, high, size=n)
    y = np.sin(x) + true_sigma(x) * rng.standard_normal(n)
    return x[:, None], y


def gap_data(n: int, rng: np.random.Generator, gap: tuple[float, float] = (-1.0, 1.0),
             span: tuple[float, float] = (-4.0, 4.0), noise: float = 0.1):
    """Sine data with no inputs inside ``gap``; half the points land on each side."""
    n_left = n // 2
    left = rng.uniform(span[0], gap[0], size=n_left)
    right = rng.uniform(gap[1], span[1], size=n - n_left)
    x = np.concatenate([left, right])
    y = np.sin(x) + noise * rng.standard_normal(n)
    return x[:, None], y


def as_training_data(x, y, valid_fraction: float, seed: int) -> TrainingData:
    """Random train/valid split wrapped in a split-tagged handle."""
    n = len(y)
    perm = np.random.default_rng(seed).permutation(n)
    n_valid = max(1, int(round(valid_fraction * n)))
    va, tr = np.sort(perm[:n_valid]), np.sort(perm[n_valid:])
    return TrainingData({"train": (x[tr], y[tr]), "valid": (x[va], y[va])})
