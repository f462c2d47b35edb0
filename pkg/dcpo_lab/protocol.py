"""Protocol dataclasses, enums, and schemas."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, Iterable, List, Optional, Tuple

from .errors import ConfigurationError

SCHEMA_VERSION = 1


class Algorithm(str, Enum):
    GRPO = "grpo"
    DCPO = "dcpo"
    COUPLED = "coupled"


class LossKind(str, Enum):
    ABSOLUTE = "absolute"
    SQUARED = "squared"


class ConfidenceSource(str, Enum):
    VERBAL = "verbal"
    LOGITS = "logits"


class PhiMode(str, Enum):
    CORRELATED = "correlated"
    INDEPENDENT = "independent"


class RunStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


class RunKind(str, Enum):
    TRAIN = "train"
    CELL = "cell"
    EXPERIMENT = "experiment"
    THEORY = "theory"


def check_keys(data: Dict[str, Any], allowed: Iterable[str], where: str) -> None:
    """Reject unknown keys. Keys starting with `_` are comments."""
    if not isinstance(data, dict):
        raise ConfigurationError(f"{where}: expected an object, got {type(data).__name__}")
    unknown = sorted(k for k in data if k not in allowed and not k.startswith("_"))
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")


def _enum(cls, value: Any, where: str):
    try:
        return cls(value)
    except ValueError:
        choices = [m.value for m in cls]
        raise ConfigurationError(f"{where}: {value!r} is not one of {choices}") from None


def _check_schema(data: Dict[str, Any], where: str) -> None:
    version = data.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"{where}: unsupported schema_version {version!r}")


@dataclass(frozen=True)
class TrainerConfig:
    algorithm: Algorithm = Algorithm.DCPO
    lam: float = 0.5
    group_size: int = 8
    learning_rate: float = 0.5
    steps: int = 200
    clip_low: float = 0.20
    clip_high: float = 0.28
    corrupt_prob: float = 0.0
    seed: int = 0
    log_every: int = 1
    calibration_loss: LossKind = LossKind.ABSOLUTE
    decoupled: bool = True
    freeze_reasoning: bool = False
    rollout_reuse: int = 1
    confidence_source: ConfidenceSource = ConfidenceSource.VERBAL
    eval_repeats: int = 4
    num_bins: int = 10

    def __post_init__(self) -> None:
        object.__setattr__(self, "algorithm", _enum(Algorithm, self.algorithm, "algorithm"))
        object.__setattr__(
            self, "calibration_loss", _enum(LossKind, self.calibration_loss, "calibration_loss")
        )
        object.__setattr__(
            self,
            "confidence_source",
            _enum(ConfidenceSource, self.confidence_source, "confidence_source"),
        )
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError(f"lambda must be in [0, 1], got {self.lam}")
        if self.group_size < 2:
            raise ConfigurationError(f"group_size must be >= 2, got {self.group_size}")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.steps < 0:
            raise ConfigurationError(f"steps must be >= 0, got {self.steps}")
        for name in ("clip_low", "clip_high"):
            value = getattr(self, name)
            if not 0.0 < value < 1.0:
                raise ConfigurationError(f"{name} must be in (0, 1), got {value}")
        if not 0.0 <= self.corrupt_prob < 1.0:
            raise ConfigurationError(f"corrupt_prob must be in [0, 1), got {self.corrupt_prob}")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {self.seed}")
        if self.log_every < 1:
            raise ConfigurationError(f"log_every must be >= 1, got {self.log_every}")
        if self.rollout_reuse < 1:
            raise ConfigurationError(f"rollout_reuse must be >= 1, got {self.rollout_reuse}")
        if self.eval_repeats < 1:
            raise ConfigurationError(f"eval_repeats must be >= 1, got {self.eval_repeats}")
        if self.num_bins < 1:
            raise ConfigurationError(f"num_bins must be >= 1, got {self.num_bins}")

    def with_seed(self, seed: int) -> "TrainerConfig":
        return replace(self, seed=int(seed))

    def updated(self, overrides: Dict[str, Any]) -> "TrainerConfig":
        merged = self.to_dict()
        merged.update(overrides)
        return TrainerConfig.from_dict(merged)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "TrainerConfig":
        check_keys(data, _TRAINER_KEYS, "trainer")
        defaults = cls()
        return cls(
            algorithm=data.get("algorithm", defaults.algorithm),
            lam=float(data.get("lambda", defaults.lam)),
            group_size=int(data.get("group_size", defaults.group_size)),
            learning_rate=float(data.get("learning_rate", defaults.learning_rate)),
            steps=int(data.get("steps", defaults.steps)),
            clip_low=float(data.get("clip_low", defaults.clip_low)),
            clip_high=float(data.get("clip_high", defaults.clip_high)),
            corrupt_prob=float(data.get("corrupt_prob", defaults.corrupt_prob)),
            seed=int(data.get("seed", defaults.seed)),
            log_every=int(data.get("log_every", defaults.log_every)),
            calibration_loss=data.get("calibration_loss", defaults.calibration_loss),
            decoupled=bool(data.get("decoupled", defaults.decoupled)),
            freeze_reasoning=bool(data.get("freeze_reasoning", defaults.freeze_reasoning)),
            rollout_reuse=int(data.get("rollout_reuse", defaults.rollout_reuse)),
            confidence_source=data.get("confidence_source", defaults.confidence_source),
            eval_repeats=int(data.get("eval_repeats", defaults.eval_repeats)),
            num_bins=int(data.get("num_bins", defaults.num_bins)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "algorithm": self.algorithm.value,
            "lambda": self.lam,
            "group_size": self.group_size,
            "learning_rate": self.learning_rate,
            "steps": self.steps,
            "clip_low": self.clip_low,
            "clip_high": self.clip_high,
            "corrupt_prob": self.corrupt_prob,
            "seed": self.seed,
            "log_every": self.log_every,
            "calibration_loss": self.calibration_loss.value,
            "decoupled": self.decoupled,
            "freeze_reasoning": self.freeze_reasoning,
            "rollout_reuse": self.rollout_reuse,
            "confidence_source": self.confidence_source.value,
            "eval_repeats": self.eval_repeats,
            "num_bins": self.num_bins,
        }


_TRAINER_KEYS = set(TrainerConfig().to_dict())


@dataclass(frozen=True)
class SuiteSpec:
    seed: int = 0
    num_tasks: int = 8
    n_trajectories: int = 10
    difficulty_spec: Tuple[Tuple[float, float], ...] = ((0.3, 0.5), (0.7, 0.5))
    phi_mode: PhiMode = PhiMode.CORRELATED
    allow_degenerate: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "phi_mode", _enum(PhiMode, self.phi_mode, "phi_mode"))
        object.__setattr__(
            self,
            "difficulty_spec",
            tuple((float(f), float(w)) for f, w in self.difficulty_spec),
        )

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SuiteSpec":
        check_keys(data, _SUITE_KEYS, "suite")
        defaults = cls()
        return cls(
            seed=int(data.get("seed", defaults.seed)),
            num_tasks=int(data.get("num_tasks", defaults.num_tasks)),
            n_trajectories=int(data.get("n_trajectories", defaults.n_trajectories)),
            difficulty_spec=tuple(
                tuple(entry) for entry in data.get("difficulty_spec", defaults.difficulty_spec)
            ),
            phi_mode=data.get("phi_mode", defaults.phi_mode),
            allow_degenerate=bool(data.get("allow_degenerate", defaults.allow_degenerate)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "num_tasks": self.num_tasks,
            "n_trajectories": self.n_trajectories,
            "difficulty_spec": [[f, w] for f, w in self.difficulty_spec],
            "phi_mode": self.phi_mode.value,
            "allow_degenerate": self.allow_degenerate,
        }


_SUITE_KEYS = set(SuiteSpec().to_dict())


@dataclass(frozen=True)
class InitSpec:
    """How the initial policy is built before training."""

    vocab_size: int = 21
    confidence_bias: float = 0.0

    def __post_init__(self) -> None:
        if self.vocab_size < 2:
            raise ConfigurationError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if not math.isfinite(self.confidence_bias):
            raise ConfigurationError("confidence_bias must be finite")

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "InitSpec":
        check_keys(data, {"vocab_size", "confidence_bias"}, "initial")
        defaults = cls()
        return cls(
            vocab_size=int(data.get("vocab_size", defaults.vocab_size)),
            confidence_bias=float(data.get("confidence_bias", defaults.confidence_bias)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {"vocab_size": self.vocab_size, "confidence_bias": self.confidence_bias}


@dataclass(frozen=True)
class RunConfig:
    """A single training run: the `train --config` document."""

    suite: SuiteSpec = field(default_factory=SuiteSpec)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    initial: InitSpec = field(default_factory=InitSpec)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        check_keys(data, {"schema_version", "suite", "trainer", "initial"}, "config")
        _check_schema(data, "config")
        return cls(
            suite=SuiteSpec.from_dict(data.get("suite", {})),
            trainer=TrainerConfig.from_dict(data.get("trainer", {})),
            initial=InitSpec.from_dict(data.get("initial", {})),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "suite": self.suite.to_dict(),
            "trainer": self.trainer.to_dict(),
            "initial": self.initial.to_dict(),
        }


@dataclass(frozen=True)
class VariantSpec:
    name: str
    trainer: TrainerConfig
    initial: InitSpec = field(default_factory=InitSpec)
    warm_start: Optional[str] = None

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "VariantSpec":
        check_keys(data, {"name", "trainer", "initial", "warm_start"}, "variant")
        if not data.get("name"):
            raise ConfigurationError("variant: name is required")
        return cls(
            name=str(data["name"]),
            trainer=TrainerConfig.from_dict(data.get("trainer", {})),
            initial=InitSpec.from_dict(data.get("initial", {})),
            warm_start=data.get("warm_start"),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "trainer": self.trainer.to_dict(),
            "initial": self.initial.to_dict(),
            "warm_start": self.warm_start,
        }


@dataclass(frozen=True)
class ExperimentSpec:
    name: str
    suite: SuiteSpec
    variants: Tuple[VariantSpec, ...]
    output_dir: str = "runs"
    repeats: int = 1
    base_seed: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "variants", tuple(self.variants))
        if self.repeats < 1:
            raise ConfigurationError(f"repeats must be >= 1, got {self.repeats}")
        if not self.variants:
            raise ConfigurationError("experiment needs at least one variant")
        names = [v.name for v in self.variants]
        if len(set(names)) != len(names):
            raise ConfigurationError(f"variant names must be unique: {names}")
        for index, variant in enumerate(self.variants):
            if variant.warm_start is not None and variant.warm_start not in names[:index]:
                raise ConfigurationError(
                    f"variant {variant.name!r} warm-starts from {variant.warm_start!r}, "
                    "which must be an earlier variant"
                )

    @property
    def seeds(self) -> List[int]:
        # every variant shares this list index-by-index
        return [self.base_seed + i for i in range(self.repeats)]

    def with_output_dir(self, output_dir: str) -> "ExperimentSpec":
        return replace(self, output_dir=str(output_dir))

    def with_base_seed(self, base_seed: int) -> "ExperimentSpec":
        return replace(self, base_seed=int(base_seed))

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ExperimentSpec":
        check_keys(
            data,
            {"schema_version", "name", "suite", "variants", "output_dir", "repeats", "base_seed"},
            "experiment",
        )
        _check_schema(data, "experiment")
        return cls(
            name=str(data.get("name", "experiment")),
            suite=SuiteSpec.from_dict(data.get("suite", {})),
            variants=tuple(VariantSpec.from_dict(v) for v in data.get("variants", [])),
            output_dir=str(data.get("output_dir", "runs")),
            repeats=int(data.get("repeats", 1)),
            base_seed=int(data.get("base_seed", 0)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "suite": self.suite.to_dict(),
            "variants": [v.to_dict() for v in self.variants],
            "output_dir": self.output_dir,
            "repeats": self.repeats,
            "base_seed": self.base_seed,
        }


@dataclass
class RunRecord:
    run_id: str
    kind: RunKind
    request: Dict[str, Any] = field(default_factory=dict)
    status: RunStatus = RunStatus.PENDING
    result: Optional[Dict[str, Any]] = None
    error: Optional[str] = None
    # wall-clock fields stay None for experiment cells so output trees are reproducible
    created_at: Optional[str] = None
    started_at: Optional[str] = None
    completed_at: Optional[str] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            "run_id": self.run_id,
            "kind": self.kind.value,
            "request": self.request,
            "status": self.status.value,
            "result": self.result,
            "error": self.error,
            "created_at": self.created_at,
            "started_at": self.started_at,
            "completed_at": self.completed_at,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunRecord":
        return cls(
            run_id=data.get("run_id", ""),
            kind=RunKind(data.get("kind", RunKind.TRAIN)),
            request=dict(data.get("request") or {}),
            status=RunStatus(data.get("status", RunStatus.PENDING)),
            result=data.get("result"),
            error=data.get("error"),
            created_at=data.get("created_at"),
            started_at=data.get("started_at"),
            completed_at=data.get("completed_at"),
        )


SUITE_SCHEMA = {
    "type": "object",
    "properties": {
        "seed": {"type": "integer"},
        "num_tasks": {"type": "integer", "minimum": 1},
        "n_trajectories": {"type": "integer", "minimum": 2},
        "difficulty_spec": {
            "type": "array",
            "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
        },
        "phi_mode": {"type": "string", "enum": [m.value for m in PhiMode]},
        "allow_degenerate": {"type": "boolean"},
    },
}

TRAINER_SCHEMA = {
    "type": "object",
    "properties": {
        "algorithm": {"type": "string", "enum": [a.value for a in Algorithm]},
        "lambda": {"type": "number", "minimum": 0, "maximum": 1},
        "group_size": {"type": "integer", "minimum": 2},
        "learning_rate": {"type": "number"},
        "steps": {"type": "integer", "minimum": 0},
        "clip_low": {"type": "number"},
        "clip_high": {"type": "number"},
        "corrupt_prob": {"type": "number"},
        "seed": {"type": "integer"},
        "log_every": {"type": "integer", "minimum": 1},
        "calibration_loss": {"type": "string", "enum": [k.value for k in LossKind]},
        "decoupled": {"type": "boolean"},
        "freeze_reasoning": {"type": "boolean"},
        "rollout_reuse": {"type": "integer", "minimum": 1},
        "confidence_source": {"type": "string", "enum": [s.value for s in ConfidenceSource]},
        "eval_repeats": {"type": "integer", "minimum": 1},
        "num_bins": {"type": "integer", "minimum": 1},
    },
}

TRAIN_TOOL_SCHEMA = {
    "type": "object",
    "properties": {
        "suite": SUITE_SCHEMA,
        "trainer": TRAINER_SCHEMA,
        "initial": {
            "type": "object",
            "properties": {
                "vocab_size": {"type": "integer", "minimum": 2},
                "confidence_bias": {"type": "number"},
            },
        },
        "output_dir": {"type": "string"},
    },
}

RECORDS_TOOL_SCHEMA = {
    "type": "object",
    "properties": {
        "confidence": {"type": "array", "items": {"type": "number"}},
        "correct": {"type": "array", "items": {"type": "integer", "enum": [0, 1]}},
        "bins": {"type": "integer", "minimum": 1},
    },
    "required": ["confidence", "correct"],
}

EXPERIMENT_TOOL_SCHEMA = {
    "type": "object",
    "properties": {
        "preset": {"type": "string"},
        "output_dir": {"type": "string"},
        "base_seed": {"type": "integer"},
    },
    "required": ["preset", "output_dir"],
}
