"""Independent reference implementations used as test oracles."""
from __future__ import annotations

import itertools

import numpy as np


def auc_pairwise(pos, neg, ties: float = 0.0) -> float:
    """Count every (positive, negative) pair directly."""
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += ties
    return wins / (len(pos) * len(neg))


def best_two_partition(values) -> tuple[float, float]:
    """Centres (low, high) of the 2-partition with least within-cluster squared
    error, found by enumerating every subset."""
    x = np.asarray(values, dtype=np.float64)
    best, centres = np.inf, None
    n = len(x)
    for mask in itertools.product((False, True), repeat=n - 1):
        sel = np.array((True,) + mask)  # fix the first point's side to halve the search
        if sel.all():
            continue
        a, b = x[sel], x[~sel]
        sse = ((a - a.mean()) ** 2).sum() + ((b - b.mean()) ** 2).sum()
        if sse < best - 1e-15:
            best, centres = sse, tuple(sorted((a.mean(), b.mean())))
    return centres


def bimodal_set(rng: np.random.Generator, n: int) -> np.ndarray:
    """Two tight, well separated groups (each at least one point)."""
    k = int(rng.integers(1, n))
    lo = rng.uniform(-1.0, 0.2)
    hi = lo + rng.uniform(0.5, 1.0)
    spread = rng.uniform(0.0, 0.05)
    return np.concatenate([lo + rng.uniform(-spread, spread, k), hi + rng.uniform(-spread, spread, n - k)])
