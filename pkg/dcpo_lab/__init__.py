"""Desk-scale RLVR lab: GRPO, DCPO and a coupled baseline over enumerable trajectory spaces."""

__version__ = "0.1.0"

from .errors import (
    ConfigurationError,
    DivergenceError,
    FormatError,
    LabError,
    NumericError,
    UsageError,
)
from .protocol import (
    Algorithm,
    ConfidenceSource,
    ExperimentSpec,
    InitSpec,
    LossKind,
    PhiMode,
    RunConfig,
    SuiteSpec,
    TrainerConfig,
    VariantSpec,
)
from .taskenv import TaskInstance, TaskSuite, generate_suite, make_task, parse_confidence, render_output
from .policy import ConfidenceVocab, GroupRollout, PolicyGradient, PolicyParams, sample_rollout
from .trainer import TrainLog, evaluate_policy, train

__all__ = [
    "__version__",
    "Algorithm",
    "ConfidenceSource",
    "ConfidenceVocab",
    "ConfigurationError",
    "DivergenceError",
    "ExperimentSpec",
    "FormatError",
    "GroupRollout",
    "InitSpec",
    "LabError",
    "LossKind",
    "NumericError",
    "PhiMode",
    "PolicyGradient",
    "PolicyParams",
    "RunConfig",
    "SuiteSpec",
    "TaskInstance",
    "TaskSuite",
    "TrainLog",
    "TrainerConfig",
    "UsageError",
    "VariantSpec",
    "evaluate_policy",
    "generate_suite",
    "make_task",
    "parse_confidence",
    "render_output",
    "sample_rollout",
    "train",
]
