"""
Independent reference implementations used to cross-check the fast paths:
direct-loop calibration metrics, a literal group normalization, and
centered finite differences.
"""

from __future__ import annotations

import logging
import math
from typing import Callable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)


def _bin_of(c: float, num_bins: int) -> int:
    return min(int(math.floor(c * num_bins)), num_bins - 1)


def _bins(confidence: Sequence[float], correct: Sequence[int], num_bins: int):
    members = [[] for _ in range(num_bins)]
    for c, y in zip(confidence, correct):
        members[_bin_of(c, num_bins)].append((c, y))
    return members


def brute_force_ece(confidence: Sequence[float], correct: Sequence[int], num_bins: int = 10) -> float:
    n = len(confidence)
    total = 0.0
    for members in _bins(confidence, correct, num_bins):
        if not members:
            continue
        c = sum(m[0] for m in members) / len(members)
        a = sum(m[1] for m in members) / len(members)
        total += len(members) / n * abs(a - c)
    return total


def brute_force_pce(confidence: Sequence[float], correct: Sequence[int], num_bins: int = 10) -> float:
    n = len(confidence)
    total = 0.0
    for members in _bins(confidence, correct, num_bins):
        if not members:
            continue
        c = sum(m[0] for m in members) / len(members)
        a = sum(m[1] for m in members) / len(members)
        if c > a:
            total += len(members) / n * abs(a - c)
    return total


def brute_force_auroc(confidence: Sequence[float], correct: Sequence[int]) -> Optional[float]:
    """Fraction of (positive, negative) pairs ranked correctly, ties 0.5."""
    positives = [c for c, y in zip(confidence, correct) if y == 1]
    negatives = [c for c, y in zip(confidence, correct) if y == 0]
    if not positives or not negatives:
        return None
    wins = 0.0
    for cp in positives:
        for cn in negatives:
            if cp > cn:
                wins += 1.0
            elif cp == cn:
                wins += 0.5
    return wins / (len(positives) * len(negatives))


def brute_force_brier(confidence: Sequence[float], correct: Sequence[int]) -> float:
    return sum((c - y) ** 2 for c, y in zip(confidence, correct)) / len(confidence)


def reference_group_normalize(rewards: Sequence[float]):
    g = len(rewards)
    m = sum(rewards) / g
    var = sum((r - m) ** 2 for r in rewards) / g
    sigma = math.sqrt(var)
    if sigma < 1e-8:
        return [0.0] * g, True
    return [(r - m) / sigma for r in rewards], False


def finite_difference(func: Callable[[np.ndarray], float], x0: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Centered-difference gradient of a scalar function of a flat vector."""
    x0 = np.asarray(x0, dtype=float)
    logger.debug("finite difference over %d coordinates, eps=%g", x0.size, eps)
    grad = np.zeros(x0.size)
    for j in range(x0.size):
        x = x0.copy()
        x.flat[j] = x0.flat[j] + eps
        fplus = func(x)
        x.flat[j] = x0.flat[j] - eps
        fminus = func(x)
        grad[j] = (fplus - fminus) / (2 * eps)
    return grad.reshape(x0.shape)
