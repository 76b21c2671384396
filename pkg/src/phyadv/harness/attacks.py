"""Gradient-free evasion attack that only ever sees class probabilities."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..modclass import predict_proba


class Oracle:
    """Prediction-only view of a model that counts queries.

    The wrapped model is held in a closure, so attack code receiving an
    ``Oracle`` has no attribute through which to reach weights or gradients.
    """

    def __init__(self, model):
        self._query = lambda x: predict_proba(model, x)
        self.queries = 0

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 2:
            x = x[None]
        self.queries += len(x)
        return self._query(x)


@dataclass
class RandomSearchRecord:
    success: bool
    delta: np.ndarray
    l2: float
    power_ratio: float
    queries: int


def _margin(probs: np.ndarray, label: int) -> np.ndarray:
    """True-class probability minus the best other class; negative means misclassified."""
    others = np.delete(probs, label, axis=1)
    return probs[:, label] - others.max(axis=1)


def random_search_attack(oracle, frame, label: int, power_ratio: float, queries: int, seed=0,
                         explore_fraction: float = 0.5, batch: int = 32) -> RandomSearchRecord:
    """Random directions on the budget sphere, then greedy local refinement.

    The first ``explore_fraction`` of the query budget samples independent
    directions with ``||delta||^2 = power_ratio * ||frame||^2`` and keeps the
    one with the lowest true-class margin. The rest perturbs that best
    direction, projects back onto the sphere and accepts improvements,
    halving the step after a batch without progress. Stops at the first
    misclassification. A frame the oracle already gets wrong costs one
    query and succeeds with delta = 0. Failure is a record, not an error.
    """
    x = np.asarray(frame, dtype=float)
    zero = np.zeros_like(x)
    if queries <= 0:
        return RandomSearchRecord(False, zero, 0.0, 0.0, 0)
    rng = np.random.default_rng(seed)
    energy = float(np.sum(x**2))
    radius = math.sqrt(power_ratio * energy)
    used = 1
    if _margin(oracle(x), label)[0] < 0:
        return RandomSearchRecord(True, zero, 0.0, 0.0, used)

    def on_sphere(d):
        norms = np.sqrt(np.sum(d**2, axis=tuple(range(1, d.ndim)), keepdims=True))
        return d * (radius / np.maximum(norms, 1e-300))

    best, best_margin = None, math.inf
    explore = max(1, int(queries * explore_fraction))
    step = 0.5
    while used < queries:
        size = min(batch, queries - used)
        if used < explore or best is None:
            cand = on_sphere(rng.standard_normal((size,) + x.shape))
        else:
            noise = on_sphere(rng.standard_normal((size,) + x.shape))
            cand = on_sphere(best[None] + step * noise)
        margins = _margin(oracle(x[None] + cand), label)
        used += size
        i = int(np.argmin(margins))
        if margins[i] < best_margin:
            best, best_margin = cand[i], float(margins[i])
        elif used > explore:
            step /= 2
        if best_margin < 0:
            l2 = float(np.linalg.norm(best))
            return RandomSearchRecord(True, best, l2, l2**2 / energy, used)
    return RandomSearchRecord(False, zero, 0.0, 0.0, used)


def random_search_frames(oracle, frames, labels, power_ratio: float, queries: int, seed: int = 0):
    """Run the attack frame by frame (frame i draws from stream (seed, i)); returns (deltas, records)."""
    records = [random_search_attack(oracle, f, int(y), power_ratio, queries, seed=[seed, i])
               for i, (f, y) in enumerate(zip(frames, labels))]
    deltas = np.stack([r.delta for r in records]) if records else np.zeros((0,) + np.shape(frames)[1:])
    return deltas, records
