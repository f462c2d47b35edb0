"""Calibration metrics: ECE, PCE, AUROC, Brier, and reliability bins."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from .errors import UsageError

DEFAULT_BINS = 10


@dataclass(frozen=True)
class CalibrationRecord:
    confidence: float
    correct: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise UsageError(f"confidence {self.confidence} is outside [0, 1]")
        if self.correct not in (0, 1):
            raise UsageError(f"correct must be 0 or 1, got {self.correct!r}")


@dataclass(frozen=True)
class ReliabilityBins:
    num_bins: int
    counts: Tuple[int, ...]
    mean_confidence: Tuple[Optional[float], ...]  # None for empty bins
    accuracy: Tuple[Optional[float], ...]
    total: int

    def edges(self, m: int) -> Tuple[float, float]:
        return m / self.num_bins, (m + 1) / self.num_bins

    def occupied(self):
        for m, count in enumerate(self.counts):
            if count:
                yield m, count, self.mean_confidence[m], self.accuracy[m]

    def to_rows(self) -> List[Dict[str, Any]]:
        rows = []
        for m in range(self.num_bins):
            lo, hi = self.edges(m)
            rows.append(
                {
                    "bin_lo": lo,
                    "bin_hi": hi,
                    "count": self.counts[m],
                    "mean_conf": self.mean_confidence[m],
                    "accuracy": self.accuracy[m],
                }
            )
        return rows


def records_from_arrays(confidence: Sequence[float], correct: Sequence[int]) -> List[CalibrationRecord]:
    if len(confidence) != len(correct):
        raise UsageError(f"{len(confidence)} confidences but {len(correct)} labels")
    return [CalibrationRecord(float(c), int(y)) for c, y in zip(confidence, correct)]


def _arrays(records: Sequence[CalibrationRecord]) -> Tuple[np.ndarray, np.ndarray]:
    if not records:
        raise UsageError("no calibration records")
    conf = np.array([r.confidence for r in records], dtype=float)
    correct = np.array([r.correct for r in records], dtype=float)
    return conf, correct


def bin_index(confidence: np.ndarray, num_bins: int) -> np.ndarray:
    """Equal-width bins over [0, 1]; the last bin is closed at 1.0."""
    return np.minimum(np.floor(confidence * num_bins).astype(int), num_bins - 1)


def bin_records(records: Sequence[CalibrationRecord], num_bins: int = DEFAULT_BINS) -> ReliabilityBins:
    if num_bins < 1:
        raise UsageError(f"need at least one bin, got {num_bins}")
    conf, correct = _arrays(records)
    idx = bin_index(conf, num_bins)
    counts = np.bincount(idx, minlength=num_bins)
    conf_sums = np.bincount(idx, weights=conf, minlength=num_bins)
    correct_sums = np.bincount(idx, weights=correct, minlength=num_bins)
    means: List[Optional[float]] = []
    accs: List[Optional[float]] = []
    for m in range(num_bins):
        if counts[m]:
            means.append(float(conf_sums[m] / counts[m]))
            accs.append(float(correct_sums[m] / counts[m]))
        else:
            means.append(None)
            accs.append(None)
    return ReliabilityBins(
        num_bins=num_bins,
        counts=tuple(int(c) for c in counts),
        mean_confidence=tuple(means),
        accuracy=tuple(accs),
        total=len(records),
    )


def ece(bins: ReliabilityBins) -> float:
    return float(sum(count / bins.total * abs(a - c) for _, count, c, a in bins.occupied()))


def pce(bins: ReliabilityBins) -> float:
    """ECE restricted to over-confident bins."""
    return float(sum(count / bins.total * (c - a) for _, count, c, a in bins.occupied() if c > a))


def auroc(records: Sequence[CalibrationRecord]) -> Optional[float]:
    """Mann-Whitney AUROC with ties worth one half; None on single-class data."""
    conf, correct = _arrays(records)
    positive = correct == 1
    n_pos = int(positive.sum())
    n_neg = len(correct) - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    ranks = rankdata(conf)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def brier(records: Sequence[CalibrationRecord]) -> float:
    conf, correct = _arrays(records)
    return float(np.mean((conf - correct) ** 2))


def summarize(records: Sequence[CalibrationRecord], num_bins: int = DEFAULT_BINS) -> Dict[str, Any]:
    """The `{n, ece, pce, auroc, brier}` document."""
    bins = bin_records(records, num_bins)
    return {
        "n": len(records),
        "ece": ece(bins),
        "pce": pce(bins),
        "auroc": auroc(records),
        "brier": brier(records),
    }
