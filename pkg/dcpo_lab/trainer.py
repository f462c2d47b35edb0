"""Clipped-surrogate policy-gradient training for GRPO, DCPO and the coupled baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax

from .advantage import AdvantagePair, decoupled_advantages, group_normalize, shared_advantages
from .calibration import (
    CalibrationRecord,
    ReliabilityBins,
    auroc,
    bin_records,
    brier,
    ece,
    pce,
)
from .errors import DivergenceError, UsageError
from .policy import (
    GroupRollout,
    PolicyGradient,
    PolicyParams,
    expected_confidence,
    mean_entropy,
    reasoning_dist,
    sample_rollout,
)
from .protocol import Algorithm, ConfidenceSource, TrainerConfig
from .rewards import build_reward_bundle, coupled_rewards
from .taskenv import TaskSuite

logger = logging.getLogger(__name__)

# one reasoning token and one confidence token per sample
TOKENS_PER_SAMPLE = 2

LOG_HEADER = ("step", "acc", "conf_mean", "conf_var", "ece", "pce", "auroc", "entropy", "grad_norm")

Observer = Callable[[int, PolicyParams], None]


@dataclass(frozen=True)
class TrainLogRow:
    step: int
    acc: float
    conf_mean: Optional[float]
    conf_var: Optional[float]
    ece: Optional[float]
    pce: Optional[float]
    auroc: Optional[float]
    entropy: float
    grad_norm: float

    def to_dict(self) -> Dict[str, Any]:
        return {name: getattr(self, name) for name in LOG_HEADER}


@dataclass
class TrainLog:
    rows: List[TrainLogRow] = field(default_factory=list)

    def append(self, row: TrainLogRow) -> None:
        if self.rows and row.step <= self.rows[-1].step:
            raise UsageError(f"log step {row.step} does not follow {self.rows[-1].step}")
        self.rows.append(row)

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self) -> Iterator[TrainLogRow]:
        return iter(self.rows)

    def series(self, name: str) -> List[Optional[float]]:
        return [getattr(row, name) for row in self.rows]

    def csv_rows(self) -> Iterator[List[str]]:
        """Header then one row per step. Floats use repr so reloads are exact; None is empty."""
        yield list(LOG_HEADER)
        for row in self.rows:
            yield [_format_cell(getattr(row, name)) for name in LOG_HEADER]

    @classmethod
    def from_csv_rows(cls, rows: Sequence[Sequence[str]]) -> "TrainLog":
        rows = list(rows)
        if not rows or tuple(rows[0]) != LOG_HEADER:
            raise UsageError(f"train log header must be {','.join(LOG_HEADER)}")
        log = cls()
        for raw in rows[1:]:
            values = dict(zip(LOG_HEADER, raw))
            log.append(
                TrainLogRow(
                    step=int(values["step"]),
                    **{name: _parse_cell(values[name]) for name in LOG_HEADER[1:]},
                )
            )
        return log


def _format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_cell(text: str) -> Optional[float]:
    return None if text == "" else float(text)


@dataclass(frozen=True, eq=False)
class SourceMetrics:
    """Calibration of one confidence source; every field but `n` is None when no record exists."""

    conf_mean: Optional[float]
    ece: Optional[float]
    pce: Optional[float]
    auroc: Optional[float]
    brier: Optional[float]
    n: int
    bins: Optional[ReliabilityBins]

    @classmethod
    def from_records(cls, records: Sequence[CalibrationRecord], num_bins: int) -> "SourceMetrics":
        if not records:
            return cls(None, None, None, None, None, 0, None)
        bins = bin_records(records, num_bins)
        return cls(
            conf_mean=float(np.mean([r.confidence for r in records])),
            ece=ece(bins),
            pce=pce(bins),
            auroc=auroc(records),
            brier=brier(records),
            n=len(records),
            bins=bins,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "conf_mean": self.conf_mean,
            "ece": self.ece,
            "pce": self.pce,
            "auroc": self.auroc,
            "brier": self.brier,
            "n": self.n,
        }


@dataclass(frozen=True, eq=False)
class EvaluationReport:
    """Accuracy of the evaluated policy plus calibration under every confidence source.

    The flat calibration attributes (`ece`, `pce`, ...) read the configured `source`;
    `sources` holds both so runs trained with different sources compare like for like.
    """

    exact_accuracy: float
    empirical_accuracy: float
    expected_confidence: float
    format_error_rate: float
    entropy: float
    source: ConfidenceSource
    sources: Dict[ConfidenceSource, SourceMetrics]

    def for_source(self, source: ConfidenceSource) -> SourceMetrics:
        return self.sources[ConfidenceSource(source)]

    @property
    def primary(self) -> SourceMetrics:
        return self.sources[self.source]

    @property
    def conf_mean(self) -> Optional[float]:
        return self.primary.conf_mean

    @property
    def ece(self) -> Optional[float]:
        return self.primary.ece

    @property
    def pce(self) -> Optional[float]:
        return self.primary.pce

    @property
    def auroc(self) -> Optional[float]:
        return self.primary.auroc

    @property
    def brier(self) -> Optional[float]:
        return self.primary.brier

    @property
    def n(self) -> int:
        return self.primary.n

    @property
    def bins(self) -> Optional[ReliabilityBins]:
        return self.primary.bins

    def to_dict(self) -> Dict[str, Any]:
        doc = {
            "exact_accuracy": self.exact_accuracy,
            "empirical_accuracy": self.empirical_accuracy,
            "expected_confidence": self.expected_confidence,
            "format_error_rate": self.format_error_rate,
            "entropy": self.entropy,
            "confidence_source": self.source.value,
            "sources": {source.value: metrics.to_dict() for source, metrics in self.sources.items()},
        }
        doc.update(self.primary.to_dict())
        return doc


def _check_rollout(old_params: PolicyParams, rollout: GroupRollout) -> int:
    t = old_params.check_task(rollout.task_id)
    log_p = log_softmax(old_params.reasoning_logits[t])
    for s in rollout.samples:
        y = old_params.check_trajectory(s.trajectory)
        log_q = log_softmax(old_params.confidence_logits[t, y])
        if abs(log_p[y] - s.logprob_reasoning) > 1e-9 or abs(log_q[s.conf_bin] - s.logprob_conf) > 1e-9:
            raise UsageError(f"rollout for task {t} was not sampled under the given old parameters")
    return t


def token_ratios(old_params: PolicyParams, new_params: PolicyParams, rollout: GroupRollout) -> np.ndarray:
    """Per-sample (reasoning, confidence) ratios pi_new / pi_old, shape [G, 2]."""
    t = _check_rollout(old_params, rollout)
    log_p = log_softmax(new_params.reasoning_logits[t])
    ratios = np.empty((rollout.G, TOKENS_PER_SAMPLE))
    for i, s in enumerate(rollout.samples):
        log_q = log_softmax(new_params.confidence_logits[t, s.trajectory])
        ratios[i, 0] = np.exp(log_p[s.trajectory] - s.logprob_reasoning)
        ratios[i, 1] = np.exp(log_q[s.conf_bin] - s.logprob_conf)
    return ratios


def _block_advantages(adv: AdvantagePair, algorithm: Algorithm) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    if algorithm is Algorithm.GRPO:
        return adv.a_reasoning, None
    if algorithm is Algorithm.COUPLED:
        # one sequence-level advantage, no masking
        return adv.a_reasoning, adv.a_reasoning
    return adv.a_reasoning, adv.a_conf


def _accumulate(
    grad: PolicyGradient,
    old_params: PolicyParams,
    new_params: PolicyParams,
    rollout: GroupRollout,
    adv: AdvantagePair,
    algorithm: Algorithm,
    clip_low: float,
    clip_high: float,
) -> None:
    t = _check_rollout(old_params, rollout)
    a_r, a_c = _block_advantages(adv, algorithm)
    if len(a_r) != rollout.G:
        raise UsageError(f"{len(a_r)} advantages for a group of {rollout.G}")
    lo, hi = 1.0 - clip_low, 1.0 + clip_high
    weight = 1.0 / (rollout.G * TOKENS_PER_SAMPLE)
    log_p_new = log_softmax(new_params.reasoning_logits[t])
    p_new = np.exp(log_p_new)
    for i, s in enumerate(rollout.samples):
        # the clipped ratio has zero gradient outside [lo, hi]
        rho = np.exp(log_p_new[s.trajectory] - s.logprob_reasoning)
        if lo <= rho <= hi and a_r[i] != 0.0:
            g = -p_new
            g[s.trajectory] += 1.0
            grad.reasoning[t] += weight * a_r[i] * rho * g
        if a_c is None or a_c[i] == 0.0:
            continue
        log_q_new = log_softmax(new_params.confidence_logits[t, s.trajectory])
        q_new = np.exp(log_q_new)
        rho = np.exp(log_q_new[s.conf_bin] - s.logprob_conf)
        if lo <= rho <= hi:
            g = -q_new
            g[s.conf_bin] += 1.0
            grad.confidence[t, s.trajectory] += weight * a_c[i] * rho * g


def surrogate_gradient(
    old_params: PolicyParams,
    new_params: PolicyParams,
    rollout: GroupRollout,
    adv: AdvantagePair,
    algorithm: Algorithm,
    clip_low: float = 0.20,
    clip_high: float = 0.28,
) -> PolicyGradient:
    """Gradient of the masked clipped surrogate with respect to `new_params`.

    Reasoning tokens see A_r and confidence tokens see A_c. GRPO drops the
    confidence term; the coupled baseline puts its single advantage (passed
    as `adv.a_reasoning`) on both blocks.
    """
    grad = PolicyGradient.zeros_like(new_params)
    _accumulate(grad, old_params, new_params, rollout, adv, Algorithm(algorithm), clip_low, clip_high)
    return grad


def surrogate_objective(
    old_params: PolicyParams,
    new_params: PolicyParams,
    rollout: GroupRollout,
    adv: AdvantagePair,
    algorithm: Algorithm,
    clip_low: float = 0.20,
    clip_high: float = 0.28,
) -> float:
    a_r, a_c = _block_advantages(adv, Algorithm(algorithm))
    ratios = np.clip(token_ratios(old_params, new_params, rollout), 1.0 - clip_low, 1.0 + clip_high)
    total = float(np.sum(ratios[:, 0] * a_r))
    if a_c is not None:
        total += float(np.sum(ratios[:, 1] * a_c))
    return total / (rollout.G * TOKENS_PER_SAMPLE)


def gradient_norm(gradient: PolicyGradient) -> float:
    return float(np.linalg.norm(gradient.as_vector()))


def compute_advantages(rollout: GroupRollout, config: TrainerConfig) -> AdvantagePair:
    if config.algorithm is Algorithm.COUPLED:
        return shared_advantages(coupled_rewards(rollout))
    if config.algorithm is Algorithm.GRPO:
        a_r, degenerate = group_normalize(rollout.correct)
        return AdvantagePair(a_r, np.zeros(rollout.G), degenerate, True)
    bundle = build_reward_bundle(rollout, config.lam, config.calibration_loss)
    if not config.decoupled:
        return shared_advantages(bundle.r_reasoning + bundle.r_conf)
    return decoupled_advantages(bundle)


def rollout_records(rollouts: Sequence[GroupRollout], source: ConfidenceSource) -> Tuple[List[CalibrationRecord], int]:
    """Calibration records from sampled groups, plus the number of malformed samples.

    Verbal confidence drops malformed samples; sequence-probability confidence
    exists for every sample.
    """
    records: List[CalibrationRecord] = []
    malformed = 0
    for rollout in rollouts:
        for s in rollout.samples:
            if not s.well_formed:
                malformed += 1
            if source is ConfidenceSource.LOGITS:
                records.append(CalibrationRecord(min(1.0, float(np.exp(s.logprob_reasoning))), s.correct))
            elif s.well_formed:
                records.append(CalibrationRecord(s.conf_value, s.correct))
    return records, malformed


def exact_mean_accuracy(params: PolicyParams, suite: TaskSuite) -> float:
    return float(np.mean([task.rewards @ reasoning_dist(params, task.task_id) for task in suite]))


def _log_row(
    step: int,
    params: PolicyParams,
    suite: TaskSuite,
    rollouts: Sequence[GroupRollout],
    grad: PolicyGradient,
    config: TrainerConfig,
) -> TrainLogRow:
    records, _ = rollout_records(rollouts, config.confidence_source)
    conf_mean = conf_var = ece_value = pce_value = auroc_value = None
    if records:
        conf = np.array([r.confidence for r in records])
        conf_mean, conf_var = float(conf.mean()), float(conf.var())
        bins = bin_records(records, config.num_bins)
        ece_value, pce_value, auroc_value = ece(bins), pce(bins), auroc(records)
    return TrainLogRow(
        step=step,
        acc=exact_mean_accuracy(params, suite),
        conf_mean=conf_mean,
        conf_var=conf_var,
        ece=ece_value,
        pce=pce_value,
        auroc=auroc_value,
        entropy=mean_entropy(params, range(len(suite))),
        grad_norm=gradient_norm(grad),
    )


def train(
    config: TrainerConfig,
    suite: TaskSuite,
    initial: PolicyParams,
    observer: Optional[Observer] = None,
) -> Tuple[PolicyParams, TrainLog]:
    """Run `config.steps` gradient-ascent steps; deterministic given `config.seed`."""
    if initial.num_tasks != len(suite) or initial.num_trajectories != suite.num_trajectories:
        raise UsageError(
            f"policy covers {initial.num_tasks}x{initial.num_trajectories}, "
            f"suite is {len(suite)}x{suite.num_trajectories}"
        )
    params = initial.copy()
    log = TrainLog()
    if config.steps == 0:
        return params, log

    rng = np.random.default_rng(config.seed)
    behaviour = params
    rollouts: List[GroupRollout] = []
    advantages: List[AdvantagePair] = []
    for step in range(1, config.steps + 1):
        if (step - 1) % config.rollout_reuse == 0:
            behaviour = params
            rollouts = [
                sample_rollout(behaviour, task, config.group_size, config.corrupt_prob, rng) for task in suite
            ]
            advantages = [compute_advantages(r, config) for r in rollouts]

        grad = PolicyGradient.zeros_like(params)
        for rollout, adv in zip(rollouts, advantages):
            _accumulate(
                grad, behaviour, params, rollout, adv, config.algorithm, config.clip_low, config.clip_high
            )
        if config.freeze_reasoning:
            grad.reasoning[:] = 0.0

        params = params.ascend(grad, config.learning_rate)
        if not params.is_finite():
            logger.warning("training diverged at step %d (%s)", step, config.algorithm.value)
            raise DivergenceError(step)

        if step % config.log_every == 0:
            row = _log_row(step, params, suite, rollouts, grad, config)
            log.append(row)
            logger.info(
                "step %d acc=%.4f conf_mean=%s grad_norm=%.4g", step, row.acc, row.conf_mean, row.grad_norm
            )
            if observer is not None:
                observer(step, params)
    return params, log


def evaluate_policy(params: PolicyParams, suite: TaskSuite, config: TrainerConfig) -> EvaluationReport:
    """Sample `eval_repeats` groups per task from a stream derived from the seed, then score them."""
    rng = np.random.default_rng([config.seed, 1])
    rollouts = [
        sample_rollout(params, task, config.group_size, config.corrupt_prob, rng)
        for _ in range(config.eval_repeats)
        for task in suite
    ]
    sources: Dict[ConfidenceSource, SourceMetrics] = {}
    for source in ConfidenceSource:
        records, malformed = rollout_records(rollouts, source)
        sources[source] = SourceMetrics.from_records(records, config.num_bins)
    total = sum(r.G for r in rollouts)
    correct = np.concatenate([r.correct for r in rollouts])
    return EvaluationReport(
        exact_accuracy=exact_mean_accuracy(params, suite),
        empirical_accuracy=float(correct.mean()),
        expected_confidence=float(np.mean([expected_confidence(params, t.task_id) for t in suite])),
        format_error_rate=malformed / total,
        entropy=mean_entropy(params, range(len(suite))),
        source=ConfidenceSource(config.confidence_source),
        sources=sources,
    )
