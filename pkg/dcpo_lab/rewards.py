"""Reward signals: correctness, group accuracy, hybrid calibration target, confidence and coupled rewards."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, UsageError
from .policy import GroupRollout
from .protocol import LossKind

# Equal to the worst calibration miss, so a malformed output never beats a wrong confidence.
FORMAT_PENALTY = -1.0


@dataclass(frozen=True, eq=False)
class RewardBundle:
    r_reasoning: np.ndarray
    group_accuracy: float
    r_target: np.ndarray
    r_conf: np.ndarray
    lam: float


def group_accuracy(r: Sequence[float]) -> float:
    r = np.asarray(r, dtype=float)
    if r.size == 0:
        raise UsageError("group accuracy of an empty group")
    return float(np.mean(r))


def _check_lambda(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ConfigurationError(f"lambda must be in [0, 1], got {lam}")


def hybrid_target(group_acc: float, instance_r: float, lam: float) -> float:
    _check_lambda(lam)
    if not 0.0 <= group_acc <= 1.0:
        raise UsageError(f"group accuracy {group_acc} is outside [0, 1]")
    return lam * group_acc + (1.0 - lam) * instance_r


def confidence_reward(
    conf_value: Optional[float],
    r_ig: float,
    well_formed: bool,
    loss: LossKind = LossKind.ABSOLUTE,
) -> float:
    if not well_formed:
        return FORMAT_PENALTY
    gap = conf_value - r_ig
    if LossKind(loss) is LossKind.SQUARED:
        return -gap * gap
    return -abs(gap)


def coupled_reward(instance_r: float, conf_value: float) -> float:
    """Correctness minus the Brier penalty, one scalar for the whole sequence."""
    return instance_r - (conf_value - instance_r) ** 2


def build_reward_bundle(
    rollout: GroupRollout, lam: float, loss: LossKind = LossKind.ABSOLUTE
) -> RewardBundle:
    _check_lambda(lam)
    r = rollout.correct
    acc = group_accuracy(r)
    targets = np.array([hybrid_target(acc, ri, lam) for ri in r])
    r_conf = np.array(
        [
            confidence_reward(s.conf_value, t, s.well_formed, loss)
            for s, t in zip(rollout.samples, targets)
        ]
    )
    return RewardBundle(r_reasoning=r, group_accuracy=acc, r_target=targets, r_conf=r_conf, lam=lam)


def coupled_rewards(rollout: GroupRollout) -> np.ndarray:
    return np.array(
        [
            coupled_reward(s.correct, s.conf_value) if s.well_formed else s.correct + FORMAT_PENALTY
            for s in rollout.samples
        ]
    )
