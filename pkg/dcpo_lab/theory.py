"""Exact-enumeration certificates for the accuracy/calibration theory of trajectory-level RL."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.linalg import pinvh

from .advantage import AdvantagePair, group_normalize
from .errors import UsageError
from .oracles import finite_difference, reference_group_normalize
from .policy import (
    ConfidenceVocab,
    PolicyParams,
    entropy,
    expected_confidence,
    fisher_matrix,
    reasoning_dist,
    sample_rollout,
    score,
)
from .protocol import Algorithm, LossKind, TrainerConfig
from .taskenv import TaskInstance, TaskSuite, generate_suite, make_task
from .trainer import surrogate_gradient, surrogate_objective, train

logger = logging.getLogger(__name__)

PINV_RTOL = 1e-10


@dataclass(frozen=True)
class CalLossSpec:
    kind: LossKind = LossKind.SQUARED

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", LossKind(self.kind))

    def evaluate(self, c: float, t: float) -> float:
        if self.kind is LossKind.SQUARED:
            return (c - t) ** 2
        return abs(c - t)

    def derivative_in_c(self, c: float, t: float) -> float:
        """dl/dc; the absolute loss takes subgradient 0 at its kink."""
        if self.kind is LossKind.SQUARED:
            return 2.0 * (c - t)
        return float(np.sign(c - t))


@dataclass(frozen=True)
class ConflictReport:
    expected_accuracy: float
    expected_confidence: float
    covariance_R_phi: float
    dl_dc: float
    inner_product: float
    identity_residual: float
    applicable: bool

    @property
    def conflict(self) -> bool:
        return self.inner_product < 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            "expected_accuracy": self.expected_accuracy,
            "expected_confidence": self.expected_confidence,
            "covariance_R_phi": self.covariance_R_phi,
            "dl_dc": self.dl_dc,
            "inner_product": self.inner_product,
            "identity_residual": self.identity_residual,
            "applicable": self.applicable,
        }


@dataclass(frozen=True)
class SubgradientComparison:
    var_instance: Optional[float]
    var_group: Optional[float]
    analytic_instance: float
    applicable: bool


@dataclass(frozen=True)
class ModeCollapseRow:
    task_id: int
    max_prob: float
    argmax_in_correct_set: bool
    entropy: float
    tail_non_decreasing: bool

    def to_dict(self) -> Dict[str, Any]:
        return {
            "task_id": self.task_id,
            "max_prob": self.max_prob,
            "argmax_in_correct_set": self.argmax_in_correct_set,
            "entropy": self.entropy,
            "tail_non_decreasing": self.tail_non_decreasing,
        }


@dataclass(frozen=True)
class OptimalConfidenceRow:
    task_id: int
    expected_confidence: float
    expected_accuracy: float

    @property
    def gap(self) -> float:
        return abs(self.expected_confidence - self.expected_accuracy)


@dataclass(frozen=True)
class CertificateResult:
    passed: bool
    observed: Any
    expected: Any
    tolerance: Any
    detail: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        out = {
            "pass": self.passed,
            "observed": self.observed,
            "expected": self.expected,
            "tolerance": self.tolerance,
        }
        if self.detail:
            out["detail"] = self.detail
        return out


def _dist(params: PolicyParams, task: TaskInstance) -> np.ndarray:
    if task.num_trajectories != params.num_trajectories:
        raise UsageError(
            f"task {task.task_id} has {task.num_trajectories} trajectories, policy has {params.num_trajectories}"
        )
    return reasoning_dist(params, task.task_id)


def exact_accuracy(params: PolicyParams, task: TaskInstance) -> float:
    return float(_dist(params, task) @ task.rewards)


def exact_confidence_feature(params: PolicyParams, task: TaskInstance) -> float:
    return float(_dist(params, task) @ task.phi_array)


def covariance_R_phi(params: PolicyParams, task: TaskInstance) -> float:
    p = _dist(params, task)
    r, phi = task.rewards, task.phi_array
    return float(p @ (r * phi) - (p @ r) * (p @ phi))


def _score_matrix(params: PolicyParams, task: TaskInstance) -> np.ndarray:
    return np.array([score(params, task.task_id, y) for y in range(task.num_trajectories)])


def exact_gradients(
    params: PolicyParams, task: TaskInstance, loss: CalLossSpec = CalLossSpec()
) -> Tuple[np.ndarray, np.ndarray]:
    """Gradients of expected accuracy and of -l(E[phi], E[R]) over the task's reasoning logits.

    The target E[R] is held constant when differentiating the calibration term.
    """
    p = _dist(params, task)
    scores = _score_matrix(params, task)
    r, phi = task.rewards, task.phi_array
    e_r, e_phi = p @ r, p @ phi
    grad_acc = scores.T @ (p * (r - e_r))
    grad_cal = -loss.derivative_in_c(e_phi, e_r) * (scores.T @ (p * (phi - e_phi)))
    return grad_acc, grad_cal


def calibration_objective(
    params: PolicyParams, task: TaskInstance, loss: CalLossSpec, target: float
) -> float:
    return -loss.evaluate(exact_confidence_feature(params, task), target)


def fisher_inner_product(a: np.ndarray, b: np.ndarray, F: np.ndarray) -> float:
    """a^T F^+ b, with eigenvalues below 1e-10 of the largest treated as zero."""
    a, b, F = np.asarray(a, dtype=float), np.asarray(b, dtype=float), np.asarray(F, dtype=float)
    if F.ndim != 2 or F.shape[0] != F.shape[1] or a.shape != (F.shape[0],) or b.shape != a.shape:
        raise UsageError(f"shape mismatch: a {a.shape}, b {b.shape}, F {F.shape}")
    if not np.allclose(F, F.T, rtol=0.0, atol=1e-12):
        raise UsageError("Fisher matrix must be symmetric")
    return float(a @ pinvh(F, rtol=PINV_RTOL) @ b)


def check_gradient_conflict(
    params: PolicyParams, task: TaskInstance, loss: CalLossSpec = CalLossSpec()
) -> ConflictReport:
    e_r = exact_accuracy(params, task)
    e_phi = exact_confidence_feature(params, task)
    cov = covariance_R_phi(params, task)
    dl_dc = loss.derivative_in_c(e_phi, e_r)
    grad_acc, grad_cal = exact_gradients(params, task, loss)
    inner = fisher_inner_product(grad_acc, grad_cal, fisher_matrix(params, task.task_id))
    return ConflictReport(
        expected_accuracy=e_r,
        expected_confidence=e_phi,
        covariance_R_phi=cov,
        dl_dc=dl_dc,
        inner_product=inner,
        identity_residual=abs(inner + dl_dc * cov),
        applicable=bool(e_phi > e_r and cov > 0.0),
    )


def group_estimator_stats(p: float, G: int, trials: int, rng: np.random.Generator) -> Tuple[float, float]:
    """Mean and variance of the group accuracy over `trials` groups of G Bernoulli(p) draws."""
    if not 0.0 <= p <= 1.0:
        raise UsageError(f"p must be in [0, 1], got {p}")
    if G < 1 or trials < 1:
        raise UsageError(f"need G >= 1 and trials >= 1, got G={G}, trials={trials}")
    estimates = rng.binomial(G, p, size=trials) / G
    return float(estimates.mean()), float(estimates.var())


def subgradient_variance_comparison(
    c: float, p: float, trials: int, rng: np.random.Generator
) -> SubgradientComparison:
    """Variance of d|c - target|/dc for an instance label R ~ Bernoulli(p) versus the group target p."""
    if not 0.0 < c < 1.0:
        raise UsageError(f"c must be in (0, 1), got {c}")
    if not 0.0 <= p <= 1.0:
        raise UsageError(f"p must be in [0, 1], got {p}")
    analytic = 4.0 * p * (1.0 - p)
    if c == p:
        return SubgradientComparison(None, None, analytic, applicable=False)
    labels = rng.binomial(1, p, size=trials).astype(float)
    instance = np.sign(c - labels)
    group = np.full(trials, np.sign(c - p))
    return SubgradientComparison(float(instance.var()), float(group.var()), analytic, applicable=True)


def mode_collapse_check(
    suite: TaskSuite, trainer_config: TrainerConfig, initial: Optional[PolicyParams] = None
) -> List[ModeCollapseRow]:
    """Train accuracy-only GRPO and report how concentrated each task's reasoning head ends up."""
    if trainer_config.algorithm is not Algorithm.GRPO:
        raise UsageError("mode collapse is checked on accuracy-only (grpo) training")
    initial = initial or PolicyParams.for_suite(suite, ConfidenceVocab.uniform(2))
    trace: List[np.ndarray] = []

    def observe(step: int, params: PolicyParams) -> None:
        trace.append(np.array([reasoning_dist(params, t.task_id).max() for t in suite]))

    params, _ = train(trainer_config, suite, initial, observer=observe)
    tail = np.array(trace[-max(1, len(trace) // 10):]) if trace else np.zeros((0, len(suite)))
    rows = []
    for task in suite:
        p = reasoning_dist(params, task.task_id)
        column = tail[:, task.task_id] if len(tail) else np.zeros(0)
        rows.append(
            ModeCollapseRow(
                task_id=task.task_id,
                max_prob=float(p.max()),
                argmax_in_correct_set=int(np.argmax(p)) in task.correct_set,
                entropy=entropy(params, task.task_id),
                tail_non_decreasing=bool(np.all(np.diff(column) >= 0.0)),
            )
        )
    return rows


def optimal_confidence_check(trained_params: PolicyParams, suite: TaskSuite) -> List[OptimalConfidenceRow]:
    return [
        OptimalConfidenceRow(
            task_id=task.task_id,
            expected_confidence=expected_confidence(trained_params, task.task_id),
            expected_accuracy=exact_accuracy(trained_params, task),
        )
        for task in suite
    ]


def decoupled_optimality_suite() -> TaskSuite:
    """Ten tasks with uniform-policy accuracy 0.1, 0.2, ..., 0.9 and 0.5."""
    sizes = [1, 2, 3, 4, 5, 6, 7, 8, 9, 5]
    return TaskSuite(
        tasks=tuple(make_task(i, 10, range(k)) for i, k in enumerate(sizes)),
        seed=0,
        difficulty_spec=tuple((k / 10, 1 / len(sizes)) for k in sizes),
    )


def mode_collapse_config(seed: int, learning_rate: float = 2.0) -> TrainerConfig:
    return TrainerConfig(
        algorithm=Algorithm.GRPO, learning_rate=learning_rate, steps=2000, group_size=8, seed=seed, log_every=20
    )


def decoupled_optimality_config(seed: int) -> TrainerConfig:
    return TrainerConfig(
        algorithm=Algorithm.DCPO,
        lam=1.0,
        group_size=20,
        learning_rate=2.0,
        steps=1500,
        calibration_loss=LossKind.SQUARED,
        freeze_reasoning=True,
        seed=seed,
        log_every=1500,
    )


def single_task_params(logits: Sequence[float], vocab_size: int = 2) -> PolicyParams:
    logits = np.asarray(logits, dtype=float)
    return PolicyParams(
        logits[None, :], np.zeros((1, logits.size, vocab_size)), ConfidenceVocab.uniform(vocab_size)
    )


def random_conflict_fixture(rng: np.random.Generator) -> Tuple[PolicyParams, TaskInstance]:
    """Rejection-sample an over-confident policy with Cov(R, phi) > 0."""
    while True:
        n = int(rng.integers(2, 9))
        k = int(rng.integers(1, n))
        correct = rng.choice(n, size=k, replace=False)
        phi = rng.uniform(0.2, 0.7, size=n)
        phi[correct] = rng.uniform(0.7, 1.0, size=k)
        params = single_task_params(rng.normal(0.0, 1.5, size=n))
        task = make_task(0, n, correct, phi=phi)
        if exact_confidence_feature(params, task) > exact_accuracy(params, task) and covariance_R_phi(params, task) > 0:
            return params, task


def worked_conflict_fixture() -> Tuple[PolicyParams, TaskInstance]:
    """p = (0.8, 0.2), R = (0, 1), phi = (0.5, 1)."""
    return single_task_params([np.log(4.0), 0.0]), make_task(0, 2, [1], phi=[0.5, 1.0])


def _certify_worked_conflict() -> CertificateResult:
    params, task = worked_conflict_fixture()
    report = check_gradient_conflict(params, task, CalLossSpec(LossKind.SQUARED))
    passed = abs(report.inner_product + 0.064) <= 1e-10 and report.identity_residual <= 1e-10
    return CertificateResult(passed, report.inner_product, -0.064, 1e-10, report.to_dict())


def _certify_random_conflicts(rng: np.random.Generator, count: int = 100) -> CertificateResult:
    worst = 0.0
    negative = 0
    for _ in range(count):
        params, task = random_conflict_fixture(rng)
        report = check_gradient_conflict(params, task, CalLossSpec(LossKind.SQUARED))
        worst = max(worst, report.identity_residual / max(1.0, abs(report.inner_product)))
        negative += report.inner_product < 0.0
    return CertificateResult(
        worst <= 1e-8 and negative == count,
        worst,
        0.0,
        1e-8,
        {"fixtures": count, "negative_inner_products": negative},
    )


def _certify_exact_gradients(rng: np.random.Generator, count: int = 50) -> CertificateResult:
    loss = CalLossSpec(LossKind.SQUARED)
    worst = 0.0
    for _ in range(count):
        params, task = random_conflict_fixture(rng)
        grad_acc, grad_cal = exact_gradients(params, task, loss)
        target = exact_accuracy(params, task)

        def with_logits(x: np.ndarray) -> PolicyParams:
            return single_task_params(x, params.vocab.size)

        fd_acc = finite_difference(lambda x: exact_accuracy(with_logits(x), task), params.reasoning_logits[0])
        fd_cal = finite_difference(
            lambda x: calibration_objective(with_logits(x), task, loss, target), params.reasoning_logits[0]
        )
        worst = max(worst, float(np.max(np.abs(fd_acc - grad_acc))), float(np.max(np.abs(fd_cal - grad_cal))))
    return CertificateResult(worst <= 1e-6, worst, 0.0, 1e-6, {"fixtures": count})


def random_surrogate_fixture(
    rng: np.random.Generator, group_size: int = 4, vocab_size: int = 5
) -> Tuple[PolicyParams, TaskInstance, AdvantagePair]:
    n = int(rng.integers(2, 7))
    params = PolicyParams(
        rng.normal(0.0, 1.0, size=(1, n)),
        rng.normal(0.0, 1.0, size=(1, n, vocab_size)),
        ConfidenceVocab.uniform(vocab_size),
    )
    task = make_task(0, n, [0])
    adv = AdvantagePair(rng.normal(size=group_size), rng.normal(size=group_size), False, False)
    return params, task, adv


def _certify_surrogate_gradients(rng: np.random.Generator, count: int = 50) -> CertificateResult:
    worst = 0.0
    for _ in range(count):
        params, task, adv = random_surrogate_fixture(rng)
        rollout = sample_rollout(params, task, len(adv.a_reasoning), 0.0, rng)
        grad = surrogate_gradient(params, params, rollout, adv, Algorithm.DCPO)
        shape_r = params.reasoning_logits.shape
        flat = np.concatenate([params.reasoning_logits.ravel(), params.confidence_logits.ravel()])

        def objective(x: np.ndarray) -> float:
            moved = PolicyParams(
                x[: np.prod(shape_r)].reshape(shape_r),
                x[np.prod(shape_r):].reshape(params.confidence_logits.shape),
                params.vocab,
            )
            return surrogate_objective(params, moved, rollout, adv, Algorithm.DCPO)

        worst = max(worst, float(np.max(np.abs(finite_difference(objective, flat) - grad.as_vector()))))
    return CertificateResult(worst <= 1e-6, worst, 0.0, 1e-6, {"fixtures": count})


def _certify_decoupling(rng: np.random.Generator, count: int = 20) -> CertificateResult:
    failures = 0
    for _ in range(count):
        params, task, adv = random_surrogate_fixture(rng, group_size=8)
        rollout = sample_rollout(params, task, 8, 0.0, rng)
        base = surrogate_gradient(params, params, rollout, adv, Algorithm.DCPO)
        perturbed = AdvantagePair(adv.a_reasoning, adv.a_conf + rng.normal(size=8), False, False)
        moved = surrogate_gradient(params, params, rollout, perturbed, Algorithm.DCPO)
        conf_only = surrogate_gradient(
            params, params, rollout, AdvantagePair(np.zeros(8), adv.a_conf, True, False), Algorithm.DCPO
        )
        reasoning_only = surrogate_gradient(
            params, params, rollout, AdvantagePair(adv.a_reasoning, np.zeros(8), False, True), Algorithm.DCPO
        )
        ok = (
            np.array_equal(base.reasoning, moved.reasoning)
            and not np.any(conf_only.reasoning)
            and not np.any(reasoning_only.confidence)
        )
        failures += not ok
    return CertificateResult(failures == 0, failures, 0, 0, {"fixtures": count})


def _certify_group_normalize(rng: np.random.Generator, count: int = 1000) -> CertificateResult:
    worst = 0.0
    mismatched_flags = 0
    for _ in range(count):
        g = int(rng.integers(2, 17))
        rewards = rng.integers(0, 2, size=g).astype(float) if rng.random() < 0.5 else rng.normal(size=g)
        fast, degenerate = group_normalize(rewards)
        slow, slow_degenerate = reference_group_normalize(list(rewards))
        worst = max(worst, float(np.max(np.abs(fast - np.array(slow)))))
        mismatched_flags += degenerate != slow_degenerate
    return CertificateResult(worst <= 1e-12 and mismatched_flags == 0, worst, 0.0, 1e-12, {"groups": count})


def _certify_group_estimator(p: float, rng: np.random.Generator, G: int = 8, trials: int = 100_000) -> CertificateResult:
    mean, var = group_estimator_stats(p, G, trials, rng)
    expected_var = p * (1 - p) / G
    mean_bound = 3.0 * np.sqrt(p * (1 - p) / (G * trials))
    passed = abs(mean - p) <= mean_bound and abs(var - expected_var) <= 0.05 * expected_var
    return CertificateResult(
        bool(passed),
        {"mean": mean, "var": var},
        {"mean": p, "var": expected_var},
        {"mean": float(mean_bound), "var_relative": 0.05},
    )


def _certify_subgradient(p: float, rng: np.random.Generator, c: float = 0.6, trials: int = 100_000) -> CertificateResult:
    result = subgradient_variance_comparison(c, p, trials, rng)
    passed = (
        result.applicable
        and abs(result.var_instance - result.analytic_instance) <= 0.02 * result.analytic_instance
        and result.var_group == 0.0
    )
    return CertificateResult(
        bool(passed),
        {"var_instance": result.var_instance, "var_group": result.var_group},
        {"var_instance": result.analytic_instance, "var_group": 0.0},
        {"var_instance_relative": 0.02, "var_group": 0.0},
    )


def _certify_mode_collapse(base_seed: int, seeds: int = 20) -> CertificateResult:
    collapsed = 0
    tails = 0
    for seed in range(base_seed, base_seed + seeds):
        suite = generate_suite(seed, 1, 20, [(0.15, 1.0)])
        (row,) = mode_collapse_check(suite, mode_collapse_config(seed))
        ok = row.max_prob >= 0.99 and row.argmax_in_correct_set and row.entropy <= 0.05
        collapsed += ok
        tails += row.tail_non_decreasing
        logger.info("mode collapse seed %d: max_prob=%.5f entropy=%.4f", seed, row.max_prob, row.entropy)
    fraction = collapsed / seeds
    return CertificateResult(
        fraction >= 0.9,
        fraction,
        ">= 0.9 of seeds",
        0.0,
        {"seeds": seeds, "tail_non_decreasing": tails / seeds},
    )


def _certify_decoupled_optimality(seed: int) -> CertificateResult:
    suite = decoupled_optimality_suite()
    initial = PolicyParams.for_suite(suite)
    params, _ = train(decoupled_optimality_config(seed), suite, initial)
    rows = optimal_confidence_check(params, suite)
    gaps = [row.gap for row in rows]
    return CertificateResult(
        max(gaps) <= 0.05,
        max(gaps),
        0.0,
        0.05,
        {"gaps": gaps, "vocab_half_step": params.vocab.half_step},
    )


def run_certificates(seed: int = 0, include_training: bool = True) -> Dict[str, CertificateResult]:
    """Run every certificate; training-based ones are skipped when `include_training` is false."""
    rng = np.random.default_rng(seed)
    results: Dict[str, CertificateResult] = {
        "gradient_conflict_worked": _certify_worked_conflict(),
        "gradient_conflict_random": _certify_random_conflicts(rng),
        "exact_gradients_finite_difference": _certify_exact_gradients(rng),
        "surrogate_gradient_finite_difference": _certify_surrogate_gradients(rng),
        "decoupled_gradient_masking": _certify_decoupling(rng),
        "group_normalize_reference": _certify_group_normalize(rng),
    }
    for p in (0.1, 0.5, 0.9):
        results[f"group_estimator_p{p}"] = _certify_group_estimator(p, rng)
    for p in (0.5, 0.3):
        results[f"subgradient_variance_p{p}"] = _certify_subgradient(p, rng)
    if include_training:
        results["mode_collapse"] = _certify_mode_collapse(seed)
        results["decoupled_optimality"] = _certify_decoupled_optimality(seed)
    for name, result in results.items():
        log = logger.info if result.passed else logger.warning
        log("certificate %s: %s (observed %s)", name, "pass" if result.passed else "FAIL", result.observed)
    return results


def certificates_passed(results: Dict[str, CertificateResult]) -> bool:
    return all(r.passed for r in results.values())
