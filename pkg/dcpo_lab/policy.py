"""Tabular softmax policy: a reasoning head over trajectories and a confidence head over a vocabulary."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax, softmax
from scipy.stats import entropy as shannon_entropy

from .errors import FormatError, NumericError, UsageError
from .taskenv import TaskInstance, TaskSuite, correctness, parse_confidence, render_output


@dataclass(frozen=True)
class ConfidenceVocab:
    values: Tuple[float, ...]

    def __post_init__(self) -> None:
        values = tuple(float(v) for v in self.values)
        if len(values) < 2:
            raise UsageError("confidence vocabulary needs at least 2 values")
        if values[0] != 0.0 or values[-1] != 1.0:
            raise UsageError("confidence vocabulary must start at 0.0 and end at 1.0")
        if any(b <= a for a, b in zip(values, values[1:])):
            raise UsageError("confidence vocabulary must be strictly increasing")
        object.__setattr__(self, "values", values)

    @classmethod
    def uniform(cls, size: int = 21) -> "ConfidenceVocab":
        if size < 2:
            raise UsageError(f"vocabulary size must be >= 2, got {size}")
        return cls(tuple(float(v) for v in np.arange(size) / (size - 1)))

    @property
    def size(self) -> int:
        return len(self.values)

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.values)

    @property
    def half_step(self) -> float:
        return 0.5 * float(np.max(np.diff(self.array)))

    def nearest_bin(self, value: float) -> int:
        return int(np.argmin(np.abs(self.array - value)))


@dataclass(eq=False)
class PolicyGradient:
    """Gradient (or any update direction) over both logit tables."""

    reasoning: np.ndarray
    confidence: np.ndarray

    @classmethod
    def zeros_like(cls, params: "PolicyParams") -> "PolicyGradient":
        return cls(
            reasoning=np.zeros_like(params.reasoning_logits),
            confidence=np.zeros_like(params.confidence_logits),
        )

    def __add__(self, other: "PolicyGradient") -> "PolicyGradient":
        return PolicyGradient(self.reasoning + other.reasoning, self.confidence + other.confidence)

    def scaled(self, factor: float) -> "PolicyGradient":
        return PolicyGradient(self.reasoning * factor, self.confidence * factor)

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.reasoning.ravel(), self.confidence.ravel()])


@dataclass(eq=False)
class PolicyParams:
    reasoning_logits: np.ndarray  # [task, N]
    confidence_logits: np.ndarray  # [task, N, V]
    vocab: ConfidenceVocab = field(default_factory=ConfidenceVocab.uniform)

    def __post_init__(self) -> None:
        self.reasoning_logits = np.array(self.reasoning_logits, dtype=float)
        self.confidence_logits = np.array(self.confidence_logits, dtype=float)
        if self.reasoning_logits.ndim != 2 or self.confidence_logits.ndim != 3:
            raise UsageError("expected reasoning logits [task, N] and confidence logits [task, N, V]")
        if self.confidence_logits.shape != self.reasoning_logits.shape + (self.vocab.size,):
            raise UsageError(
                f"confidence logits shape {self.confidence_logits.shape} does not match "
                f"{self.reasoning_logits.shape + (self.vocab.size,)}"
            )

    @classmethod
    def for_suite(
        cls,
        suite: TaskSuite,
        vocab: Optional[ConfidenceVocab] = None,
        confidence_bias: float = 0.0,
    ) -> "PolicyParams":
        """Uniform reasoning head; the confidence head is tilted by `confidence_bias * value`."""
        vocab = vocab or ConfidenceVocab.uniform()
        n = suite.num_trajectories
        reasoning = np.zeros((len(suite), n))
        confidence = np.broadcast_to(confidence_bias * vocab.array, (len(suite), n, vocab.size))
        return cls(reasoning, confidence.copy(), vocab)

    @property
    def num_tasks(self) -> int:
        return self.reasoning_logits.shape[0]

    @property
    def num_trajectories(self) -> int:
        return self.reasoning_logits.shape[1]

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.reasoning_logits.copy(), self.confidence_logits.copy(), self.vocab)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.reasoning_logits)) and np.all(np.isfinite(self.confidence_logits)))

    def ascend(self, gradient: PolicyGradient, learning_rate: float) -> "PolicyParams":
        return PolicyParams(
            self.reasoning_logits + learning_rate * gradient.reasoning,
            self.confidence_logits + learning_rate * gradient.confidence,
            self.vocab,
        )

    def check_task(self, task_id: int) -> int:
        t = int(task_id)
        if not 0 <= t < self.num_tasks:
            raise UsageError(f"task {task_id} out of range (policy covers {self.num_tasks} tasks)")
        return t

    def check_trajectory(self, trajectory: int) -> int:
        y = int(trajectory)
        if not 0 <= y < self.num_trajectories:
            raise UsageError(f"trajectory {trajectory} out of range (N={self.num_trajectories})")
        return y

    def to_dict(self) -> Dict[str, Any]:
        return {
            "vocab": list(self.vocab.values),
            "tasks": [
                {
                    "task_id": t,
                    "reasoning_logits": self.reasoning_logits[t].tolist(),
                    "confidence_logits": self.confidence_logits[t].tolist(),
                }
                for t in range(self.num_tasks)
            ],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PolicyParams":
        rows = sorted(data["tasks"], key=lambda row: row["task_id"])
        if [row["task_id"] for row in rows] != list(range(len(rows))):
            raise UsageError("policy checkpoint task ids must be 0..T-1")
        return cls(
            reasoning_logits=np.array([row["reasoning_logits"] for row in rows], dtype=float),
            confidence_logits=np.array([row["confidence_logits"] for row in rows], dtype=float),
            vocab=ConfidenceVocab(tuple(data["vocab"])),
        )


@dataclass(frozen=True)
class RolloutSample:
    trajectory: int
    conf_bin: int
    conf_value: Optional[float]  # None when the text failed to parse
    well_formed: bool
    logprob_reasoning: float
    logprob_conf: float
    correct: int
    text: str


@dataclass(frozen=True)
class GroupRollout:
    task_id: int
    samples: Tuple[RolloutSample, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "samples", tuple(self.samples))
        if len(self.samples) < 2:
            raise UsageError(f"a group needs G >= 2 samples, got {len(self.samples)}")

    @property
    def G(self) -> int:
        return len(self.samples)

    @property
    def trajectories(self) -> np.ndarray:
        return np.array([s.trajectory for s in self.samples], dtype=int)

    @property
    def conf_bins(self) -> np.ndarray:
        return np.array([s.conf_bin for s in self.samples], dtype=int)

    @property
    def correct(self) -> np.ndarray:
        return np.array([s.correct for s in self.samples], dtype=float)

    @property
    def well_formed(self) -> np.ndarray:
        return np.array([s.well_formed for s in self.samples], dtype=bool)


def _checked_softmax(logits: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(logits)):
        raise NumericError(f"non-finite {what} logits")
    return softmax(logits)


def reasoning_dist(params: PolicyParams, task_id: int) -> np.ndarray:
    t = params.check_task(task_id)
    return _checked_softmax(params.reasoning_logits[t], f"reasoning (task {t})")


def confidence_dist(params: PolicyParams, task_id: int, trajectory: int) -> np.ndarray:
    t = params.check_task(task_id)
    y = params.check_trajectory(trajectory)
    return _checked_softmax(params.confidence_logits[t, y], f"confidence (task {t}, trajectory {y})")


def _inverse_cdf(probs: np.ndarray, u: float) -> int:
    cdf = np.cumsum(probs)
    index = int(np.searchsorted(cdf, u * cdf[-1], side="right"))
    return min(index, len(probs) - 1)


def sample_rollout(
    params: PolicyParams,
    task: TaskInstance,
    G: int,
    corrupt_prob: float,
    rng: np.random.Generator,
) -> GroupRollout:
    """Draw G (trajectory, confidence token) pairs.

    Exactly 3*G uniforms are consumed per call whatever the policy, so two
    runs sharing a seed stay aligned draw-for-draw even as their policies
    drift apart.
    """
    if G < 2:
        raise UsageError(f"group size must be >= 2, got {G}")
    if not 0.0 <= corrupt_prob < 1.0:
        raise UsageError(f"corrupt_prob must be in [0, 1), got {corrupt_prob}")
    t = params.check_task(task.task_id)
    if task.num_trajectories != params.num_trajectories:
        raise UsageError(
            f"task {t} has {task.num_trajectories} trajectories, policy has {params.num_trajectories}"
        )
    u_traj = rng.random(G)
    u_conf = rng.random(G)
    u_corrupt = rng.random(G)

    log_p = log_softmax(params.reasoning_logits[t])
    p = reasoning_dist(params, t)
    samples: List[RolloutSample] = []
    for i in range(G):
        y = _inverse_cdf(p, u_traj[i])
        log_q = log_softmax(params.confidence_logits[t, y])
        v = _inverse_cdf(np.exp(log_q), u_conf[i])
        rendered = render_output(task, y, params.vocab.values[v], corrupt=bool(u_corrupt[i] < corrupt_prob))
        try:
            parse_confidence(rendered.text)
            conf_value: Optional[float] = params.vocab.values[v]
            well_formed = True
        except FormatError:
            conf_value = None
            well_formed = False
        samples.append(
            RolloutSample(
                trajectory=y,
                conf_bin=v,
                conf_value=conf_value,
                well_formed=well_formed,
                logprob_reasoning=float(log_p[y]),
                logprob_conf=float(log_q[v]),
                correct=correctness(task, y),
                text=rendered.text,
            )
        )
    return GroupRollout(task_id=t, samples=tuple(samples))


def sequence_confidence(params: PolicyParams, task_id: int, trajectory: int) -> float:
    """Generation probability of the trajectory (the "logits" confidence)."""
    y = params.check_trajectory(trajectory)
    return float(reasoning_dist(params, task_id)[y])


def score(params: PolicyParams, task_id: int, trajectory: int) -> np.ndarray:
    """d log pi(y|q) / d reasoning_logits[task] = e_y - p."""
    y = params.check_trajectory(trajectory)
    g = -reasoning_dist(params, task_id)
    g[y] += 1.0
    return g


def confidence_score(params: PolicyParams, task_id: int, trajectory: int, conf_bin: int) -> np.ndarray:
    """d log pi(v|q,y) / d confidence_logits[task, y]."""
    g = -confidence_dist(params, task_id, trajectory)
    if not 0 <= conf_bin < params.vocab.size:
        raise UsageError(f"confidence bin {conf_bin} out of range (V={params.vocab.size})")
    g[conf_bin] += 1.0
    return g


def fisher_matrix(params: PolicyParams, task_id: int) -> np.ndarray:
    p = reasoning_dist(params, task_id)
    return np.diag(p) - np.outer(p, p)


def entropy(params: PolicyParams, task_id: int) -> float:
    """Shannon entropy of the reasoning head, in nats."""
    return float(shannon_entropy(reasoning_dist(params, task_id)))


def expected_confidence(params: PolicyParams, task_id: int) -> float:
    """Exact E[c|q] = sum_y pi(y|q) sum_v pi(v|q,y) * value_v."""
    t = params.check_task(task_id)
    p = reasoning_dist(params, t)
    q = softmax(params.confidence_logits[t], axis=-1)
    return float(p @ (q @ params.vocab.array))


def mean_entropy(params: PolicyParams, task_ids: Sequence[int]) -> float:
    return float(np.mean([entropy(params, t) for t in task_ids]))
