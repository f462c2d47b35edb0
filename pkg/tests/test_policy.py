import math
import unittest

import numpy as np

from dcpo_lab.errors import NumericError, UsageError
from dcpo_lab.oracles import finite_difference
from dcpo_lab.policy import (
    ConfidenceVocab,
    PolicyParams,
    confidence_dist,
    confidence_score,
    entropy,
    expected_confidence,
    fisher_matrix,
    reasoning_dist,
    sample_rollout,
    score,
    sequence_confidence,
)
from dcpo_lab.taskenv import generate_suite, make_task


def flat_params(logits, vocab_size=21, conf_logits=None):
    logits = np.asarray(logits, dtype=float)
    if conf_logits is None:
        conf_logits = np.zeros((1, logits.size, vocab_size))
    return PolicyParams(logits[None, :], conf_logits, ConfidenceVocab.uniform(vocab_size))


class VocabTests(unittest.TestCase):
    def test_default_vocab(self):
        vocab = ConfidenceVocab.uniform()
        self.assertEqual(vocab.size, 21)
        self.assertEqual(vocab.values[0], 0.0)
        self.assertEqual(vocab.values[-1], 1.0)
        self.assertAlmostEqual(vocab.values[1], 0.05)
        self.assertAlmostEqual(vocab.half_step, 0.025)

    def test_invalid_vocab(self):
        with self.assertRaises(UsageError):
            ConfidenceVocab((0.0, 0.5, 0.4, 1.0))
        with self.assertRaises(UsageError):
            ConfidenceVocab((0.1, 1.0))


class DistributionTests(unittest.TestCase):
    def test_uniform_reasoning(self):
        np.testing.assert_allclose(reasoning_dist(flat_params(np.zeros(4)), 0), [0.25] * 4)

    def test_closed_form_softmax(self):
        p = reasoning_dist(flat_params([math.log(4), 0, 0, 0]), 0)
        np.testing.assert_allclose(p, [4 / 7, 1 / 7, 1 / 7, 1 / 7], atol=1e-15)

    def test_rows_normalized(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            params = flat_params(rng.normal(0, 3, size=6), conf_logits=rng.normal(0, 3, size=(1, 6, 21)))
            self.assertAlmostEqual(reasoning_dist(params, 0).sum(), 1.0, delta=1e-12)
            self.assertAlmostEqual(confidence_dist(params, 0, 2).sum(), 1.0, delta=1e-12)

    def test_uniform_confidence(self):
        np.testing.assert_allclose(confidence_dist(flat_params(np.zeros(3)), 0, 1), [1 / 21] * 21)

    def test_peaked_confidence(self):
        conf = np.zeros((1, 3, 21))
        conf[0, 1, 7] = 10.0
        self.assertGreaterEqual(confidence_dist(flat_params(np.zeros(3), conf_logits=conf), 0, 1)[7], 0.999)

    def test_non_finite_logits(self):
        with self.assertRaises(NumericError):
            reasoning_dist(flat_params([0.0, np.inf]), 0)
        with self.assertRaises(NumericError):
            reasoning_dist(flat_params([0.0, np.nan]), 0)

    def test_bad_task_id(self):
        with self.assertRaises(UsageError):
            reasoning_dist(flat_params(np.zeros(3)), 1)


class SamplingTests(unittest.TestCase):
    def test_deterministic_policy(self):
        conf = np.zeros((1, 4, 21))
        conf[0, 2, 15] = 60.0
        params = flat_params([0, 0, 60.0, 0], conf_logits=conf)
        task = make_task(0, 4, [2])
        rollout = sample_rollout(params, task, 8, 0.0, np.random.default_rng(0))
        self.assertEqual(rollout.G, 8)
        self.assertEqual(len({(s.trajectory, s.conf_bin) for s in rollout.samples}), 1)
        self.assertEqual(rollout.samples[0].trajectory, 2)
        self.assertAlmostEqual(rollout.samples[0].conf_value, 0.75)

    def test_empirical_frequencies(self):
        params = flat_params(np.zeros(4), vocab_size=2)
        task = make_task(0, 4, [0])
        rollout = sample_rollout(params, task, 100_000, 0.0, np.random.default_rng(1))
        freq = np.bincount(rollout.trajectories, minlength=4) / rollout.G
        np.testing.assert_allclose(freq, [0.25] * 4, atol=0.01)

    def test_no_corruption(self):
        params = flat_params(np.zeros(5))
        rollout = sample_rollout(params, make_task(0, 5, [1]), 64, 0.0, np.random.default_rng(2))
        self.assertTrue(rollout.well_formed.all())
        for s in rollout.samples:
            self.assertEqual(s.conf_value, params.vocab.values[s.conf_bin])

    def test_corruption_marks_malformed(self):
        params = flat_params(np.zeros(5))
        rollout = sample_rollout(params, make_task(0, 5, [1]), 400, 0.5, np.random.default_rng(3))
        malformed = [s for s in rollout.samples if not s.well_formed]
        self.assertGreater(len(malformed), 100)
        self.assertLess(len(malformed), 300)
        self.assertTrue(all(s.conf_value is None for s in malformed))

    def test_same_rng_state_same_rollout(self):
        params = flat_params(np.random.default_rng(4).normal(size=6))
        task = make_task(0, 6, [0, 1])
        a = sample_rollout(params, task, 8, 0.2, np.random.default_rng(9))
        b = sample_rollout(params, task, 8, 0.2, np.random.default_rng(9))
        self.assertEqual(a, b)

    def test_draw_count_independent_of_policy(self):
        task = make_task(0, 6, [0, 1])
        rng_a, rng_b = np.random.default_rng(5), np.random.default_rng(5)
        sample_rollout(flat_params(np.zeros(6)), task, 8, 0.0, rng_a)
        sample_rollout(flat_params([9.0, 0, 0, 0, 0, -3.0]), task, 8, 0.0, rng_b)
        self.assertEqual(rng_a.random(), rng_b.random())

    def test_sequence_confidence_matches_logprob(self):
        params = flat_params(np.random.default_rng(6).normal(size=7))
        rollout = sample_rollout(params, make_task(0, 7, [3]), 50, 0.0, np.random.default_rng(7))
        for s in rollout.samples:
            self.assertAlmostEqual(sequence_confidence(params, 0, s.trajectory), math.exp(s.logprob_reasoning), delta=1e-12)

    def test_group_size_checked(self):
        with self.assertRaises(UsageError):
            sample_rollout(flat_params(np.zeros(3)), make_task(0, 3, [0]), 1, 0.0, np.random.default_rng(0))

    def test_correct_flag(self):
        params = flat_params(np.zeros(4))
        rollout = sample_rollout(params, make_task(0, 4, [1, 2]), 32, 0.0, np.random.default_rng(8))
        for s in rollout.samples:
            self.assertEqual(s.correct, int(s.trajectory in (1, 2)))


class GeometryTests(unittest.TestCase):
    def test_sequence_confidence(self):
        self.assertAlmostEqual(sequence_confidence(flat_params(np.zeros(4)), 0, 2), 0.25)
        self.assertAlmostEqual(sequence_confidence(flat_params([0, 80.0, 0]), 0, 1), 1.0)

    def test_sequence_confidence_identity(self):
        rng = np.random.default_rng(10)
        for _ in range(100):
            params = flat_params(rng.normal(0, 2, size=5))
            y = int(rng.integers(5))
            self.assertEqual(sequence_confidence(params, 0, y), reasoning_dist(params, 0)[y])

    def test_score_closed_form(self):
        np.testing.assert_allclose(score(flat_params(np.zeros(2)), 0, 0), [0.5, -0.5])

    def test_score_identity(self):
        rng = np.random.default_rng(11)
        for _ in range(100):
            params = flat_params(rng.normal(0, 2, size=6))
            p = reasoning_dist(params, 0)
            mean_score = sum(p[y] * score(params, 0, y) for y in range(6))
            np.testing.assert_allclose(mean_score, 0.0, atol=1e-12)

    def test_score_matches_finite_difference(self):
        rng = np.random.default_rng(12)
        logits = rng.normal(size=5)
        for y in range(5):
            fd = finite_difference(lambda x: math.log(reasoning_dist(flat_params(x), 0)[y]), logits)
            np.testing.assert_allclose(score(flat_params(logits), 0, y), fd, atol=1e-6)

    def test_confidence_score_matches_finite_difference(self):
        rng = np.random.default_rng(13)
        conf = rng.normal(size=(1, 3, 4))

        def log_q(x):
            moved = conf.copy()
            moved[0, 1] = x
            return math.log(confidence_dist(flat_params(np.zeros(3), 4, moved), 0, 1)[2])

        fd = finite_difference(log_q, conf[0, 1])
        np.testing.assert_allclose(confidence_score(flat_params(np.zeros(3), 4, conf), 0, 1, 2), fd, atol=1e-6)

    def test_fisher_closed_form(self):
        np.testing.assert_allclose(fisher_matrix(flat_params(np.zeros(2)), 0), [[0.25, -0.25], [-0.25, 0.25]])

    def test_fisher_properties(self):
        rng = np.random.default_rng(14)
        for _ in range(100):
            params = flat_params(rng.normal(0, 2, size=5))
            F = fisher_matrix(params, 0)
            p = reasoning_dist(params, 0)
            outer = sum(p[y] * np.outer(score(params, 0, y), score(params, 0, y)) for y in range(5))
            np.testing.assert_allclose(F, outer, atol=1e-12)
            np.testing.assert_allclose(F @ np.ones(5), 0.0, atol=1e-12)
            self.assertGreaterEqual(np.linalg.eigvalsh(F).min(), -1e-12)
            self.assertEqual(np.linalg.matrix_rank(F, tol=1e-10), 4)

    def test_entropy(self):
        self.assertAlmostEqual(entropy(flat_params(np.zeros(4)), 0), math.log(4))
        self.assertAlmostEqual(entropy(flat_params([0, 0, 80.0, 0]), 0), 0.0, places=12)
        rng = np.random.default_rng(15)
        for _ in range(50):
            self.assertLessEqual(entropy(flat_params(rng.normal(size=6)), 0), math.log(6) + 1e-12)


class PolicyParamsTests(unittest.TestCase):
    def test_for_suite_shapes_and_bias(self):
        suite = generate_suite(0, 3, 5, [(0.4, 1.0)])
        params = PolicyParams.for_suite(suite, ConfidenceVocab.uniform(11), confidence_bias=4.0)
        self.assertEqual(params.reasoning_logits.shape, (3, 5))
        self.assertEqual(params.confidence_logits.shape, (3, 5, 11))
        q = confidence_dist(params, 1, 2)
        self.assertTrue(np.all(np.diff(q) > 0))
        self.assertGreater(expected_confidence(params, 0), 0.5)

    def test_expected_confidence_uniform(self):
        self.assertAlmostEqual(expected_confidence(flat_params(np.zeros(3)), 0), 0.5)

    def test_dict_roundtrip(self):
        rng = np.random.default_rng(16)
        params = PolicyParams(rng.normal(size=(2, 3)), rng.normal(size=(2, 3, 5)), ConfidenceVocab.uniform(5))
        loaded = PolicyParams.from_dict(params.to_dict())
        np.testing.assert_array_equal(loaded.reasoning_logits, params.reasoning_logits)
        np.testing.assert_array_equal(loaded.confidence_logits, params.confidence_logits)
        self.assertEqual(loaded.vocab, params.vocab)

    def test_shape_mismatch(self):
        with self.assertRaises(UsageError):
            PolicyParams(np.zeros((1, 3)), np.zeros((1, 3, 4)), ConfidenceVocab.uniform(5))


if __name__ == "__main__":
    unittest.main()
