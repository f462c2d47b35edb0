"""Group-relative advantages and the decoupled reasoning/confidence pair."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .errors import UsageError
from .rewards import RewardBundle

DEGENERATE_STD = 1e-8


@dataclass(frozen=True, eq=False)
class AdvantagePair:
    a_reasoning: np.ndarray
    a_conf: np.ndarray
    degenerate_reasoning: bool
    degenerate_conf: bool


def group_normalize(rewards: Sequence[float]) -> Tuple[np.ndarray, bool]:
    """(r - mean) / std with the population std; zero-variance groups get all-zero advantages."""
    r = np.asarray(rewards, dtype=float)
    if r.ndim != 1 or r.size < 2:
        raise UsageError(f"group normalization needs G >= 2 rewards, got shape {r.shape}")
    m = r.mean()
    sigma = r.std()
    if sigma < DEGENERATE_STD:
        return np.zeros_like(r), True
    return (r - m) / sigma, False


def decoupled_advantages(bundle: RewardBundle) -> AdvantagePair:
    if len(bundle.r_reasoning) != len(bundle.r_conf):
        raise UsageError("reasoning and confidence rewards differ in length")
    a_r, deg_r = group_normalize(bundle.r_reasoning)
    a_c, deg_c = group_normalize(bundle.r_conf)
    return AdvantagePair(a_reasoning=a_r, a_conf=a_c, degenerate_reasoning=deg_r, degenerate_conf=deg_c)


def shared_advantages(rewards: Sequence[float]) -> AdvantagePair:
    """One advantage for both token blocks (coupled reward, or the undecoupled ablation)."""
    a, degenerate = group_normalize(rewards)
    return AdvantagePair(a_reasoning=a, a_conf=a.copy(), degenerate_reasoning=degenerate, degenerate_conf=degenerate)
