import unittest
from unittest import mock

import numpy as np

from dcpo_lab.advantage import AdvantagePair
from dcpo_lab.errors import DivergenceError, UsageError
from dcpo_lab.oracles import finite_difference
from dcpo_lab.policy import (
    ConfidenceVocab,
    PolicyGradient,
    PolicyParams,
    confidence_score,
    sample_rollout,
    score,
)
from dcpo_lab.protocol import Algorithm, ConfidenceSource, TrainerConfig
from dcpo_lab.taskenv import TaskSuite, generate_suite, make_task
from dcpo_lab.trainer import (
    LOG_HEADER,
    TrainLog,
    TrainLogRow,
    compute_advantages,
    evaluate_policy,
    exact_mean_accuracy,
    gradient_norm,
    rollout_records,
    surrogate_gradient,
    surrogate_objective,
    token_ratios,
    train,
)


def random_params(seed, n=4, v=5):
    rng = np.random.default_rng(seed)
    return PolicyParams(rng.normal(size=(1, n)), rng.normal(size=(1, n, v)), ConfidenceVocab.uniform(v))


def default_suite(seed=0):
    return generate_suite(seed, 8, 10, [(0.3, 0.5), (0.7, 0.5)])


def pair(a_r, a_c):
    return AdvantagePair(np.asarray(a_r, dtype=float), np.asarray(a_c, dtype=float), False, False)


class SurrogateGradientTests(unittest.TestCase):
    def setUp(self):
        self.task = make_task(0, 4, [0, 2])
        self.params = random_params(0)
        self.rollout = sample_rollout(self.params, self.task, 6, 0.0, np.random.default_rng(1))
        rng = np.random.default_rng(2)
        self.adv = pair(rng.normal(size=6), rng.normal(size=6))

    def test_on_policy_is_reinforce(self):
        grad = surrogate_gradient(self.params, self.params, self.rollout, self.adv, Algorithm.DCPO)
        expected_r = np.zeros(4)
        expected_c = np.zeros((4, 5))
        for i, s in enumerate(self.rollout.samples):
            expected_r += self.adv.a_reasoning[i] * score(self.params, 0, s.trajectory)
            expected_c[s.trajectory] += self.adv.a_conf[i] * confidence_score(self.params, 0, s.trajectory, s.conf_bin)
        np.testing.assert_allclose(grad.reasoning[0], expected_r / 12, atol=1e-12)
        np.testing.assert_allclose(grad.confidence[0], expected_c / 12, atol=1e-12)

    def test_on_policy_matches_finite_difference(self):
        for algorithm in Algorithm:
            adv = self.adv
            if algorithm is Algorithm.COUPLED:
                adv = pair(self.adv.a_reasoning, self.adv.a_reasoning)
            grad = surrogate_gradient(self.params, self.params, self.rollout, adv, algorithm)
            x0 = np.concatenate([self.params.reasoning_logits.ravel(), self.params.confidence_logits.ravel()])

            def objective(x):
                moved = PolicyParams(x[:4].reshape(1, 4), x[4:].reshape(1, 4, 5), self.params.vocab)
                return surrogate_objective(self.params, moved, self.rollout, adv, algorithm)

            with self.subTest(algorithm=algorithm.value):
                np.testing.assert_allclose(grad.as_vector(), finite_difference(objective, x0), atol=1e-6)

    def test_zero_advantages_zero_gradient(self):
        grad = surrogate_gradient(self.params, self.params, self.rollout, pair(np.zeros(6), np.zeros(6)), Algorithm.DCPO)
        self.assertEqual(gradient_norm(grad), 0.0)

    def test_grpo_drops_confidence_term(self):
        grad = surrogate_gradient(self.params, self.params, self.rollout, self.adv, Algorithm.GRPO)
        self.assertFalse(grad.confidence.any())
        self.assertTrue(grad.reasoning.any())

    def test_masking(self):
        other = pair(self.adv.a_reasoning, self.adv.a_conf * -3.0 + 1.0)
        a = surrogate_gradient(self.params, self.params, self.rollout, self.adv, Algorithm.DCPO)
        b = surrogate_gradient(self.params, self.params, self.rollout, other, Algorithm.DCPO)
        np.testing.assert_array_equal(a.reasoning, b.reasoning)
        other = pair(self.adv.a_reasoning * 2.0, self.adv.a_conf)
        c = surrogate_gradient(self.params, self.params, self.rollout, other, Algorithm.DCPO)
        np.testing.assert_array_equal(a.confidence, c.confidence)

    def test_coupled_uses_one_advantage_for_both_blocks(self):
        a = surrogate_gradient(self.params, self.params, self.rollout, self.adv, Algorithm.COUPLED)
        b = surrogate_gradient(
            self.params, self.params, self.rollout, pair(self.adv.a_reasoning, self.adv.a_reasoning), Algorithm.DCPO
        )
        np.testing.assert_array_equal(a.reasoning, b.reasoning)
        np.testing.assert_array_equal(a.confidence, b.confidence)

    def test_ratios_outside_window_give_zero_gradient(self):
        old = PolicyParams(np.zeros((1, 2)), np.zeros((1, 2, 2)), ConfidenceVocab.uniform(2))
        task = make_task(0, 2, [0])
        rollout = sample_rollout(old, task, 8, 0.0, np.random.default_rng(3))
        new = PolicyParams(
            np.array([[5.0, -5.0]]),
            np.tile(np.array([5.0, -5.0]), (1, 2, 1)),
            old.vocab,
        )
        ratios = token_ratios(old, new, rollout)
        self.assertTrue(np.all((ratios < 0.8) | (ratios > 1.28)))
        grad = surrogate_gradient(old, new, rollout, pair(np.ones(8), np.ones(8)), Algorithm.DCPO)
        self.assertEqual(gradient_norm(grad), 0.0)

    def test_rollout_from_other_params_rejected(self):
        with self.assertRaises(UsageError):
            surrogate_gradient(random_params(9), self.params, self.rollout, self.adv, Algorithm.DCPO)


class GradientNormTests(unittest.TestCase):
    def test_norm(self):
        grad = PolicyGradient(np.zeros((1, 3)), np.zeros((1, 3, 2)))
        self.assertEqual(gradient_norm(grad), 0.0)
        grad.confidence[0, 1, 1] = 3.0
        self.assertEqual(gradient_norm(grad), 3.0)
        self.assertEqual(gradient_norm(grad.scaled(2.0)), 6.0)


class ComputeAdvantagesTests(unittest.TestCase):
    def setUp(self):
        self.task = make_task(0, 4, [0, 1])
        self.params = random_params(5)
        self.rollout = sample_rollout(self.params, self.task, 16, 0.0, np.random.default_rng(6))

    def test_grpo_confidence_advantage_is_zero(self):
        adv = compute_advantages(self.rollout, TrainerConfig(algorithm=Algorithm.GRPO))
        np.testing.assert_array_equal(adv.a_conf, np.zeros(16))

    def test_dcpo_and_grpo_share_reasoning_advantage(self):
        grpo = compute_advantages(self.rollout, TrainerConfig(algorithm=Algorithm.GRPO))
        dcpo = compute_advantages(self.rollout, TrainerConfig(algorithm=Algorithm.DCPO))
        np.testing.assert_array_equal(grpo.a_reasoning, dcpo.a_reasoning)

    def test_coupled_and_undecoupled_share_advantage(self):
        for config in (TrainerConfig(algorithm=Algorithm.COUPLED), TrainerConfig(decoupled=False)):
            adv = compute_advantages(self.rollout, config)
            np.testing.assert_array_equal(adv.a_reasoning, adv.a_conf)


class TrainLogTests(unittest.TestCase):
    def row(self, step, auroc=0.5):
        return TrainLogRow(step, 0.5, 0.4, 0.01, 0.1, 0.05, auroc, 1.2, 0.3)

    def test_steps_must_increase(self):
        log = TrainLog()
        log.append(self.row(1))
        with self.assertRaises(UsageError):
            log.append(self.row(1))

    def test_csv_rows(self):
        log = TrainLog()
        log.append(self.row(2))
        log.append(self.row(4, auroc=None))
        rows = list(log.csv_rows())
        self.assertEqual(tuple(rows[0]), LOG_HEADER)
        self.assertEqual(rows[2][6], "")
        reloaded = TrainLog.from_csv_rows(rows)
        self.assertEqual(reloaded.rows, log.rows)

    def test_bad_header(self):
        with self.assertRaises(UsageError):
            TrainLog.from_csv_rows([["step", "acc"]])


class TrainTests(unittest.TestCase):
    def setUp(self):
        self.suite = default_suite()
        self.initial = PolicyParams.for_suite(self.suite)

    def test_zero_steps(self):
        params, log = train(TrainerConfig(steps=0), self.suite, self.initial)
        self.assertEqual(len(log), 0)
        np.testing.assert_array_equal(params.reasoning_logits, self.initial.reasoning_logits)
        np.testing.assert_array_equal(params.confidence_logits, self.initial.confidence_logits)

    def test_deterministic(self):
        config = TrainerConfig(steps=20, seed=3)
        a_params, a_log = train(config, self.suite, self.initial)
        b_params, b_log = train(config, self.suite, self.initial)
        self.assertEqual(a_log.rows, b_log.rows)
        np.testing.assert_array_equal(a_params.confidence_logits, b_params.confidence_logits)

    def test_seed_changes_run(self):
        _, a_log = train(TrainerConfig(steps=10, seed=0), self.suite, self.initial)
        _, b_log = train(TrainerConfig(steps=10, seed=1), self.suite, self.initial)
        self.assertNotEqual(a_log.rows, b_log.rows)

    def test_log_every(self):
        _, log = train(TrainerConfig(steps=20, log_every=5), self.suite, self.initial)
        self.assertEqual([row.step for row in log], [5, 10, 15, 20])

    def test_initial_not_mutated(self):
        before = self.initial.reasoning_logits.copy()
        train(TrainerConfig(steps=5), self.suite, self.initial)
        np.testing.assert_array_equal(self.initial.reasoning_logits, before)

    def test_shape_mismatch(self):
        other = PolicyParams.for_suite(generate_suite(0, 3, 10, [(0.5, 1.0)]))
        with self.assertRaises(UsageError):
            train(TrainerConfig(steps=1), self.suite, other)

    def test_divergence_reports_step(self):
        def poisoned(params, gradient, lr):
            return PolicyParams(
                np.full_like(params.reasoning_logits, np.nan), params.confidence_logits, params.vocab
            )

        with mock.patch("dcpo_lab.trainer.PolicyParams.ascend", poisoned):
            with self.assertRaises(DivergenceError) as ctx:
                train(TrainerConfig(steps=5), self.suite, self.initial)
        self.assertEqual(ctx.exception.step, 1)

    def test_grpo_accuracy_never_decreases(self):
        strictly_rising = 0
        for seed in range(10):
            config = TrainerConfig(algorithm=Algorithm.GRPO, steps=50, log_every=1, seed=seed)
            _, log = train(config, self.suite, self.initial)
            acc = [exact_mean_accuracy(self.initial, self.suite)] + log.series("acc")
            with self.subTest(seed=seed):
                self.assertEqual(len(acc), 51)
                self.assertTrue(all(b >= a - 1e-12 for a, b in zip(acc, acc[1:])))
                self.assertGreater(acc[-1], acc[0])
            strictly_rising += all(b > a for a, b in zip(acc, acc[1:]))
        # a step only stalls when every group in it is all-correct or all-wrong
        self.assertGreaterEqual(strictly_rising, 9)

    def test_dcpo_and_grpo_reasoning_identical(self):
        grpo, _ = train(TrainerConfig(algorithm=Algorithm.GRPO, steps=30, seed=4), self.suite, self.initial)
        dcpo, _ = train(TrainerConfig(algorithm=Algorithm.DCPO, steps=30, seed=4), self.suite, self.initial)
        np.testing.assert_array_equal(grpo.reasoning_logits, dcpo.reasoning_logits)
        np.testing.assert_array_equal(grpo.confidence_logits, self.initial.confidence_logits)
        self.assertFalse(np.array_equal(dcpo.confidence_logits, self.initial.confidence_logits))

    def test_freeze_reasoning(self):
        params, _ = train(TrainerConfig(steps=10, freeze_reasoning=True), self.suite, self.initial)
        np.testing.assert_array_equal(params.reasoning_logits, self.initial.reasoning_logits)

    def test_grpo_sequence_confidence_rises(self):
        config = TrainerConfig(algorithm=Algorithm.GRPO, steps=100, confidence_source=ConfidenceSource.LOGITS)
        _, log = train(config, self.suite, self.initial)
        conf = log.series("conf_mean")
        self.assertGreater(np.mean(conf[-10:]), np.mean(conf[:10]))

    def test_dcpo_improves_verbal_calibration(self):
        before, after = [], []
        for seed in range(3):
            config = TrainerConfig(algorithm=Algorithm.DCPO, steps=150, seed=seed)
            params, _ = train(config, self.suite, self.initial)
            before.append(evaluate_policy(self.initial, self.suite, config).ece)
            after.append(evaluate_policy(params, self.suite, config).ece)
        self.assertLess(np.mean(after), np.mean(before))

    def test_stale_rollouts_run(self):
        config = TrainerConfig(steps=12, rollout_reuse=4, seed=2)
        a, log = train(config, self.suite, self.initial)
        b, _ = train(config, self.suite, self.initial)
        self.assertEqual(len(log), 12)
        np.testing.assert_array_equal(a.reasoning_logits, b.reasoning_logits)
        c, _ = train(TrainerConfig(steps=12, seed=2), self.suite, self.initial)
        self.assertFalse(np.array_equal(a.reasoning_logits, c.reasoning_logits))


class EvaluationTests(unittest.TestCase):
    def setUp(self):
        self.suite = default_suite(1)
        self.params = PolicyParams.for_suite(self.suite)

    def test_deterministic(self):
        config = TrainerConfig(seed=5)
        a = evaluate_policy(self.params, self.suite, config).to_dict()
        b = evaluate_policy(self.params, self.suite, config).to_dict()
        self.assertEqual(a, b)

    def test_counts_and_exact_accuracy(self):
        config = TrainerConfig(eval_repeats=2, group_size=4)
        report = evaluate_policy(self.params, self.suite, config)
        self.assertEqual(report.n, 2 * 4 * len(self.suite))
        self.assertAlmostEqual(report.exact_accuracy, np.mean([t.fraction_correct for t in self.suite]))
        self.assertAlmostEqual(report.expected_confidence, 0.5)
        self.assertEqual(report.format_error_rate, 0.0)

    def test_malformed_excluded_from_verbal_records(self):
        config = TrainerConfig(corrupt_prob=0.5)
        report = evaluate_policy(self.params, self.suite, config)
        total = config.eval_repeats * config.group_size * len(self.suite)
        self.assertGreater(report.format_error_rate, 0.0)
        self.assertEqual(report.n, total - round(report.format_error_rate * total))

    def test_reports_both_confidence_sources(self):
        config = TrainerConfig(corrupt_prob=0.25, confidence_source=ConfidenceSource.LOGITS)
        report = evaluate_policy(self.params, self.suite, config)
        total = config.eval_repeats * config.group_size * len(self.suite)
        verbal = report.for_source(ConfidenceSource.VERBAL)
        logits = report.for_source("logits")
        self.assertEqual(logits.n, total)
        self.assertLess(verbal.n, total)
        self.assertEqual(report.pce, logits.pce)
        self.assertAlmostEqual(logits.conf_mean, 0.1)
        doc = report.to_dict()
        self.assertEqual(doc["confidence_source"], "logits")
        self.assertEqual(doc["sources"]["verbal"]["n"], verbal.n)
        self.assertEqual(doc["sources"]["logits"]["ece"], logits.ece)
        self.assertEqual(doc["n"], total)

    def test_logits_records_cover_every_sample(self):
        task = self.suite[0]
        rollout = sample_rollout(self.params, task, 8, 0.5, np.random.default_rng(0))
        verbal, malformed = rollout_records([rollout], ConfidenceSource.VERBAL)
        logits, _ = rollout_records([rollout], ConfidenceSource.LOGITS)
        self.assertEqual(len(logits), 8)
        self.assertEqual(len(verbal), 8 - malformed)
        for record in logits:
            self.assertAlmostEqual(record.confidence, 0.1)


if __name__ == "__main__":
    unittest.main()
