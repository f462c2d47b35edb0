"""Synthetic verifiable tasks over enumerable trajectory spaces, plus the `<conf>` output grammar."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError, FormatError, UsageError
from .protocol import PhiMode, SuiteSpec

CONF_DELIMITER = "<conf>"

_CONFIDENCE_RE = re.compile(r"\s*Confidence:\s*(\S+)\s*")


@dataclass(frozen=True)
class TaskInstance:
    task_id: int
    num_trajectories: int
    correct_set: Tuple[int, ...]
    phi: Tuple[float, ...]
    answer_strings: Tuple[str, ...]

    def __post_init__(self) -> None:
        n = self.num_trajectories
        if n < 2:
            raise ConfigurationError(f"task {self.task_id}: need at least 2 trajectories, got {n}")
        correct = tuple(sorted(set(int(y) for y in self.correct_set)))
        if not correct or len(correct) > n:
            raise ConfigurationError(f"task {self.task_id}: correct set size must be in [1, {n}]")
        if correct[0] < 0 or correct[-1] >= n:
            raise ConfigurationError(f"task {self.task_id}: correct set index out of range")
        object.__setattr__(self, "correct_set", correct)
        phi = tuple(float(v) for v in self.phi)
        if len(phi) != n or any(not 0.0 <= v <= 1.0 for v in phi):
            raise ConfigurationError(f"task {self.task_id}: phi must hold {n} values in [0, 1]")
        object.__setattr__(self, "phi", phi)
        answers = tuple(str(a) for a in self.answer_strings)
        if len(answers) != n or len(set(answers)) != n:
            raise ConfigurationError(f"task {self.task_id}: answer strings must be {n} distinct values")
        if any(CONF_DELIMITER in a for a in answers):
            raise ConfigurationError(f"task {self.task_id}: answer strings may not contain {CONF_DELIMITER}")
        object.__setattr__(self, "answer_strings", answers)

    @cached_property
    def rewards(self) -> np.ndarray:
        """R(y) for every trajectory, as a read-only float vector."""
        r = np.zeros(self.num_trajectories)
        r[list(self.correct_set)] = 1.0
        r.setflags(write=False)
        return r

    @cached_property
    def phi_array(self) -> np.ndarray:
        phi = np.array(self.phi, dtype=float)
        phi.setflags(write=False)
        return phi

    @property
    def fraction_correct(self) -> float:
        return len(self.correct_set) / self.num_trajectories

    @property
    def is_degenerate(self) -> bool:
        return len(self.correct_set) in (1, self.num_trajectories)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task_id": self.task_id,
            "n": self.num_trajectories,
            "correct_set": list(self.correct_set),
            "phi": list(self.phi),
            "answers": list(self.answer_strings),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TaskInstance":
        return cls(
            task_id=int(data["task_id"]),
            num_trajectories=int(data["n"]),
            correct_set=tuple(data["correct_set"]),
            phi=tuple(data["phi"]),
            answer_strings=tuple(data["answers"]),
        )


@dataclass(frozen=True)
class TaskSuite:
    tasks: Tuple[TaskInstance, ...]
    seed: int = 0
    difficulty_spec: Tuple[Tuple[float, float], ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "tasks", tuple(self.tasks))
        if not self.tasks:
            raise ConfigurationError("a suite needs at least one task")
        ids = [t.task_id for t in self.tasks]
        if ids != list(range(len(ids))):
            # task ids double as row indices into the policy tables
            raise ConfigurationError(f"task ids must be 0..{len(ids) - 1} in order, got {ids}")

    def __len__(self) -> int:
        return len(self.tasks)

    def __iter__(self):
        return iter(self.tasks)

    def __getitem__(self, task_id: int) -> TaskInstance:
        return self.tasks[task_id]

    @property
    def num_trajectories(self) -> int:
        sizes = {t.num_trajectories for t in self.tasks}
        if len(sizes) != 1:
            raise UsageError(f"suite mixes trajectory counts {sorted(sizes)}")
        return sizes.pop()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "difficulty_spec": [[f, w] for f, w in self.difficulty_spec],
            "tasks": [t.to_dict() for t in self.tasks],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TaskSuite":
        return cls(
            tasks=tuple(TaskInstance.from_dict(t) for t in data["tasks"]),
            seed=int(data.get("seed", 0)),
            difficulty_spec=tuple(tuple(entry) for entry in data.get("difficulty_spec", [])),
        )


@dataclass(frozen=True)
class RenderedOutput:
    text: str
    is_well_formed: bool


def _target_size(fraction: float, n: int) -> int:
    # nearest achievable fraction, halves round up
    return int(math.floor(fraction * n + 0.5))


def _validate_difficulty(
    difficulty_spec: Sequence[Tuple[float, float]], n: int, allow_degenerate: bool
) -> Tuple[np.ndarray, List[int]]:
    if not difficulty_spec:
        raise ConfigurationError("difficulty_spec must not be empty")
    weights = np.array([float(w) for _, w in difficulty_spec])
    if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
        raise ConfigurationError(f"difficulty weights must be non-negative and sum to 1, got {weights.tolist()}")
    sizes = []
    for fraction, _ in difficulty_spec:
        if not 0.0 < fraction <= 1.0:
            raise ConfigurationError(f"difficulty fraction {fraction} is outside (0, 1]")
        k = _target_size(fraction, n)
        if k < 1 or k > n:
            raise ConfigurationError(f"difficulty fraction {fraction} gives {k} correct of {n}")
        if not allow_degenerate and k in (1, n):
            raise ConfigurationError(
                f"difficulty fraction {fraction} gives a degenerate task ({k} correct of {n}); "
                "set allow_degenerate to permit it"
            )
        sizes.append(k)
    return weights, sizes


def generate_suite(
    seed: int,
    num_tasks: int,
    n_trajectories: int,
    difficulty_spec: Sequence[Tuple[float, float]],
    phi_mode: PhiMode = PhiMode.CORRELATED,
    allow_degenerate: bool = False,
) -> TaskSuite:
    """Build a deterministic suite: correct sets are uniform subsets of the drawn size."""
    if num_tasks < 1:
        raise ConfigurationError(f"num_tasks must be >= 1, got {num_tasks}")
    if n_trajectories < 2:
        raise ConfigurationError(f"n_trajectories must be >= 2, got {n_trajectories}")
    phi_mode = PhiMode(phi_mode)
    spec = tuple((float(f), float(w)) for f, w in difficulty_spec)
    weights, sizes = _validate_difficulty(spec, n_trajectories, allow_degenerate)

    rng = np.random.default_rng(seed)
    tasks = []
    for task_id in range(num_tasks):
        k = sizes[int(rng.choice(len(sizes), p=weights))]
        correct = np.sort(rng.choice(n_trajectories, size=k, replace=False))
        if phi_mode is PhiMode.CORRELATED:
            phi = rng.uniform(0.0, 0.5, size=n_trajectories)
            phi[correct] = 1.0
        else:
            phi = rng.uniform(0.0, 1.0, size=n_trajectories)
        answers = rng.permutation(max(100, 10 * n_trajectories))[:n_trajectories]
        tasks.append(
            TaskInstance(
                task_id=task_id,
                num_trajectories=n_trajectories,
                correct_set=tuple(int(y) for y in correct),
                phi=tuple(float(v) for v in phi),
                answer_strings=tuple(str(int(a)) for a in answers),
            )
        )
    return TaskSuite(tasks=tuple(tasks), seed=seed, difficulty_spec=spec)


def suite_from_spec(spec: SuiteSpec) -> TaskSuite:
    return generate_suite(
        seed=spec.seed,
        num_tasks=spec.num_tasks,
        n_trajectories=spec.n_trajectories,
        difficulty_spec=spec.difficulty_spec,
        phi_mode=spec.phi_mode,
        allow_degenerate=spec.allow_degenerate,
    )


def make_task(
    task_id: int,
    num_trajectories: int,
    correct_set: Iterable[int],
    phi: Optional[Sequence[float]] = None,
    answers: Optional[Sequence[str]] = None,
) -> TaskInstance:
    """Hand-built task; phi defaults to the correctness indicator."""
    correct = tuple(sorted(set(int(y) for y in correct_set)))
    if phi is None:
        phi = [1.0 if y in correct else 0.0 for y in range(num_trajectories)]
    if answers is None:
        answers = [f"y{y}" for y in range(num_trajectories)]
    return TaskInstance(
        task_id=task_id,
        num_trajectories=num_trajectories,
        correct_set=correct,
        phi=tuple(phi),
        answer_strings=tuple(answers),
    )


def _check_trajectory(task: TaskInstance, trajectory: int) -> int:
    y = int(trajectory)
    if not 0 <= y < task.num_trajectories:
        raise UsageError(
            f"trajectory {trajectory} out of range for task {task.task_id} (N={task.num_trajectories})"
        )
    return y


def correctness(task: TaskInstance, trajectory: int) -> int:
    y = _check_trajectory(task, trajectory)
    return 1 if y in task.correct_set else 0


def render_output(
    task: TaskInstance, trajectory: int, confidence_value: float, corrupt: bool = False
) -> RenderedOutput:
    y = _check_trajectory(task, trajectory)
    if not 0.0 <= confidence_value <= 1.0:
        raise UsageError(f"confidence value {confidence_value} is outside [0, 1]")
    answer = task.answer_strings[y]
    if corrupt:
        return RenderedOutput(text=f"{answer} Confidence: {confidence_value:.2f}", is_well_formed=False)
    return RenderedOutput(
        text=f"{answer} {CONF_DELIMITER} Confidence: {confidence_value:.2f}", is_well_formed=True
    )


def parse_confidence(text: str) -> float:
    """Read the confidence after the first `<conf>`; raises FormatError on any grammar violation."""
    head, sep, tail = text.partition(CONF_DELIMITER)
    if not sep:
        raise FormatError(f"missing {CONF_DELIMITER} delimiter")
    if not head.strip():
        raise FormatError(f"empty reasoning block before {CONF_DELIMITER}")
    match = _CONFIDENCE_RE.fullmatch(tail)
    if match is None:
        raise FormatError(f"expected 'Confidence: <float>' after {CONF_DELIMITER}, got {tail!r}")
    try:
        value = float(match.group(1))
    except ValueError:
        raise FormatError(f"unparseable confidence {match.group(1)!r}") from None
    if not 0.0 <= value <= 1.0:
        raise FormatError(f"confidence {value} is outside [0, 1]")
    return value
