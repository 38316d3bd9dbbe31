import math
import os

import numpy as np
from django.test import SimpleTestCase

from policies.core import ExpertClass, LesRule, UniformRandom, constant_expert, replay_arms
from policies.exceptions import (
    DimensionMismatchError,
    EnvironmentExhaustedError,
    HorizonTooShortError,
    InvariantViolationError,
    NonFiniteScoreError,
    OutcomeBoundError,
)
from policies.exp4p import (
    ExpertWeights,
    TuningParams,
    compute_tuning,
    estimate_outcomes,
    minimal_horizon,
    policy_weights,
    regret_bound,
    run_f_exp4p,
    update_weights,
)

from .environments import ArrayEnvironment, constant_environment, uniform_environment

SLOW = bool(os.getenv('POLICYLAB_SLOW_TESTS'))


class ComputeTuningTests(SimpleTestCase):
    def test_closed_form_at_unit_omega(self):
        params = compute_tuning(N=2, K=2, horizon=100, M=1.0, delta=2 / math.e ** 2)
        self.assertAlmostEqual(params.omega, 1.0, places=12)
        self.assertAlmostEqual(params.beta, 0.1, places=12)
        self.assertAlmostEqual(params.gamma, 0.117741, places=6)
        self.assertAlmostEqual(params.eta, math.sqrt(math.log(2) / 2) / 20, places=12)

    def test_homogeneity_in_outcome_cap(self):
        delta = 2 * math.exp(-2)
        one = compute_tuning(2, 2, 400, 1.0, delta)
        two = compute_tuning(2, 2, 400, 2.0, delta)
        self.assertAlmostEqual(two.beta, one.beta / 2, places=14)
        self.assertAlmostEqual(two.eta, one.eta / 2, places=14)
        self.assertEqual(two.gamma, one.gamma)
        self.assertAlmostEqual(two.eta * two.M, one.eta * one.M, places=14)

    def test_short_horizon_reports_minimum(self):
        with self.assertRaises(HorizonTooShortError) as ctx:
            compute_tuning(N=10, K=2, horizon=10, M=1.0, delta=0.05)
        self.assertEqual(ctx.exception.minimal_horizon, 19)
        self.assertEqual(minimal_horizon(10, 2, 0.05), 19)
        compute_tuning(N=10, K=2, horizon=19, M=1.0, delta=0.05)

    def test_rejects_invalid_inputs(self):
        with self.assertRaises(InvariantViolationError):
            compute_tuning(N=1, K=2, horizon=100, M=1.0, delta=0.05)
        with self.assertRaises(InvariantViolationError):
            compute_tuning(N=5, K=2, horizon=100, M=0.0, delta=0.05)
        with self.assertRaises(InvariantViolationError):
            compute_tuning(N=5, K=2, horizon=100, M=1.0, delta=1.0)

    def test_scaled_multiplies_parameters(self):
        params = compute_tuning(10, 2, 1000, 1.0, 0.05)
        scaled = params.scaled(beta=0.5, eta=1.5)
        self.assertAlmostEqual(scaled.beta, params.beta * 0.5)
        self.assertEqual(scaled.gamma, params.gamma)
        self.assertAlmostEqual(scaled.eta, params.eta * 1.5)
        with self.assertRaises(InvariantViolationError):
            params.scaled(gamma=0)

    def test_tuning_params_invariants(self):
        with self.assertRaises(InvariantViolationError):
            TuningParams(beta=2.0, gamma=0.1, eta=0.1, M=1.0, N=2, K=2, horizon=10, delta=0.1)
        with self.assertRaises(InvariantViolationError):
            TuningParams(beta=0.1, gamma=1.5, eta=0.1, M=1.0, N=2, K=2, horizon=10, delta=0.1)


class PolicyWeightTests(SimpleTestCase):
    def test_degenerate_mixture(self):
        recs = np.array([[1.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
        p = policy_weights(ExpertWeights.uniform(3), recs, gamma=0.0)
        np.testing.assert_allclose(p, [1.0, 0.0])

    def test_full_exploration_is_uniform(self):
        weights = ExpertWeights(log_scores=np.array([0.0, -3.0]), q=np.array([0.9, 0.1]))
        p = policy_weights(weights, np.array([[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]), gamma=1.0)
        np.testing.assert_allclose(p, [1 / 3, 1 / 3, 1 / 3])

    def test_hand_example(self):
        weights = ExpertWeights(log_scores=np.array([0.0, -math.log(3)]), q=np.array([0.75, 0.25]))
        p = policy_weights(weights, np.array([[1.0, 0.0], [0.0, 1.0]]), gamma=0.2)
        np.testing.assert_allclose(p, [0.7, 0.3])

    def test_floor_and_normalisation(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            q = rng.dirichlet(np.ones(6))
            recs = rng.dirichlet(np.ones(4), size=6)
            gamma = rng.uniform(0.01, 0.5)
            p = policy_weights(ExpertWeights(log_scores=np.log(q), q=q), recs, gamma)
            self.assertGreaterEqual(p.min(), gamma / 4 - 1e-15)
            self.assertAlmostEqual(p.sum(), 1.0, places=10)

    def test_recommendation_count_must_match(self):
        with self.assertRaises(DimensionMismatchError):
            policy_weights(ExpertWeights.uniform(3), np.array([[1.0, 0.0]]), 0.1)


class EstimateOutcomeTests(SimpleTestCase):
    def test_pure_inverse_weighting(self):
        np.testing.assert_allclose(estimate_outcomes(5.0, 1, [0.5, 0.5], beta=0.0, M=10.0), [10.0, 0.0])

    def test_regularised_estimate(self):
        np.testing.assert_allclose(estimate_outcomes(5.0, 1, [0.5, 0.5], beta=0.01, M=10.0), [12.0, 2.0])

    def test_zero_outcome(self):
        np.testing.assert_array_equal(estimate_outcomes(0.0, 2, [0.25, 0.75], beta=0.0, M=1.0), [0.0, 0.0])

    def test_zero_probability_is_rejected(self):
        with self.assertRaises(InvariantViolationError):
            estimate_outcomes(1.0, 1, [1.0, 0.0], beta=0.0, M=1.0)

    def test_unbiased_up_to_regulariser(self):
        rng = np.random.default_rng(17)
        p = np.array([0.3, 0.7])
        y = np.array([2.0, 5.0])
        beta, M = 0.05, 6.0
        by_arm = np.array([estimate_outcomes(y[k], k + 1, p, beta, M) for k in range(2)])
        arms = (rng.random(10 ** 5) >= p[0]).astype(int)
        draws = by_arm[arms]
        mean = draws.mean(axis=0)
        se = draws.std(axis=0, ddof=1) / math.sqrt(draws.shape[0])
        target = y + beta * M * M / p
        self.assertTrue(np.all(np.abs(mean - target) <= 3 * se + 1e-12), f"{mean} vs {target} (se {se})")


class UpdateWeightTests(SimpleTestCase):
    def test_zero_learning_rate_keeps_uniform(self):
        weights = ExpertWeights.uniform(4)
        rng = np.random.default_rng(0)
        for _ in range(50):
            weights = update_weights(weights, rng.uniform(0, 10, 4), eta=0.0)
        np.testing.assert_allclose(weights.q, np.full(4, 0.25))

    def test_softmax_ratio(self):
        eta, c = 0.5, 3.0
        weights = update_weights(ExpertWeights.uniform(2), [math.log(2) / eta + c, c], eta)
        np.testing.assert_allclose(weights.q, [2 / 3, 1 / 3], rtol=1e-12)

    def test_common_shift_leaves_weights_identical(self):
        base = ExpertWeights.uniform(3)
        scores = np.array([4.0, 1.0, 7.0])
        first = update_weights(base, scores, eta=0.5)
        second = update_weights(base, scores + 11.0, eta=0.5)
        np.testing.assert_array_equal(first.q, second.q)
        np.testing.assert_array_equal(first.log_scores, second.log_scores)

    def test_split_scores_add_up(self):
        rng = np.random.default_rng(9)
        scores = rng.uniform(0, 5, 5)
        once = update_weights(ExpertWeights.uniform(5), scores, eta=0.3)
        half = update_weights(ExpertWeights.uniform(5), scores / 2, eta=0.3)
        twice = update_weights(half, scores / 2, eta=0.3)
        np.testing.assert_allclose(once.q, twice.q, rtol=1e-12)

    def test_large_scores_do_not_overflow(self):
        weights = ExpertWeights.uniform(2)
        for _ in range(100):
            weights = update_weights(weights, [1e4, 0.0], eta=1.0)
        self.assertTrue(np.all(np.isfinite(weights.q)))
        self.assertAlmostEqual(weights.q[0], 1.0)

    def test_non_finite_score_names_expert(self):
        with self.assertRaises(NonFiniteScoreError) as ctx:
            update_weights(ExpertWeights.uniform(3), [1.0, np.inf, np.nan], eta=0.1)
        self.assertEqual(ctx.exception.expert_index, 1)


class RunTests(SimpleTestCase):
    def _params(self, N, horizon=200, M=1.0, delta=0.05):
        return compute_tuning(N, 2, horizon, M, delta)

    def test_identical_seeds_give_identical_trajectories(self):
        env = uniform_environment(200, seed=1)
        experts = [LesRule((0.0, 1.0, -1.0)), LesRule((0.2, -1.0, 0.5)), UniformRandom()]
        first = run_f_exp4p(env, experts, self._params(3), seed=12)
        second = run_f_exp4p(env, experts, self._params(3), seed=12)
        np.testing.assert_array_equal(first.probs, second.probs)
        np.testing.assert_array_equal(first.arm_indices, second.arm_indices)
        np.testing.assert_array_equal(replay_arms(first.probs, first.seed), first.arm_indices)

    def test_probability_floor_holds_every_period(self):
        env = uniform_environment(300, seed=2)
        params = self._params(4, horizon=300)
        experts = [constant_expert(1), constant_expert(2), LesRule((0, 1, -1)), UniformRandom()]
        trajectory = run_f_exp4p(env, experts, params, seed=3)
        self.assertEqual(trajectory.n_periods, 300)
        self.assertGreaterEqual(trajectory.probs.min(), params.gamma / 2 - 1e-15)
        np.testing.assert_allclose(trajectory.probs.sum(axis=1), 1.0, atol=1e-10)

    def test_single_expert_mixes_with_uniform(self):
        env = constant_environment(50, [0.4, 0.6])
        params = TuningParams(beta=0.0, gamma=0.2, eta=0.1, M=1.0, N=1, K=2, horizon=50, delta=0.1)
        trajectory = run_f_exp4p(env, [constant_expert(1)], params, seed=0)
        np.testing.assert_allclose(trajectory.probs, np.tile([0.9, 0.1], (50, 1)))

    def test_weight_moves_to_the_better_constant_expert(self):
        horizon = 1000
        snapshots = {10: [], 100: [], horizon: []}

        def record(t, p, weights):
            if t in snapshots:
                snapshots[t].append(weights.q[0])

        env = constant_environment(horizon, [1.0, 0.0])
        params = self._params(2, horizon=horizon)
        for seed in range(20):
            run_f_exp4p(env, [constant_expert(1), constant_expert(2)], params, seed=seed, on_period=record)
        medians = [float(np.median(snapshots[t])) for t in (10, 100, horizon)]
        self.assertLess(medians[0], medians[1])
        self.assertLess(medians[1], medians[2])
        self.assertGreater(medians[2], 0.9)

    def test_outcome_above_cap_names_period(self):
        outcomes = np.array([[0.5, 0.5]] * 30)
        outcomes[17] = [0.5, 3.0]
        env = ArrayEnvironment(np.full((30, 2), 0.5), outcomes, cap=1.0)
        params = self._params(2, horizon=30)
        with self.assertRaises(OutcomeBoundError) as ctx:
            run_f_exp4p(env, [constant_expert(1), UniformRandom()], params, seed=0)
        self.assertEqual(ctx.exception.period, 18)

    def test_short_environment_is_rejected(self):
        env = uniform_environment(20, seed=0)
        with self.assertRaises(EnvironmentExhaustedError):
            run_f_exp4p(env, [constant_expert(1), UniformRandom()], self._params(2, horizon=50), seed=0)

    def test_roster_size_must_match_tuning(self):
        env = uniform_environment(100, seed=0)
        with self.assertRaises(DimensionMismatchError):
            run_f_exp4p(env, [constant_expert(1), UniformRandom()], self._params(3, horizon=100), seed=0)

    def test_real_data_runs_without_counterfactuals(self):
        env = uniform_environment(100, seed=4)
        env.reveals_counterfactuals = False
        trajectory = run_f_exp4p(env, [constant_expert(2), UniformRandom()], self._params(2, horizon=100), seed=1)
        self.assertFalse(trajectory.has_counterfactuals)


class RegretBoundTests(SimpleTestCase):
    """Empirical regret against the best expert in hindsight stays under 7M√(KT ln(N/δ))."""

    def test_high_probability_bound(self):
        T, delta = 1000, 0.05
        replications = 400 if SLOW else 40
        rng = np.random.default_rng(2024)
        experts = [LesRule(rng.normal(size=3)) for _ in range(9)] + [UniformRandom()]
        roster = ExpertClass.finite(experts)
        params = compute_tuning(len(experts), 2, T, 1.0, delta)
        bound = regret_bound(1.0, 2, T, len(experts), delta)

        exceed = 0
        for rep in range(replications):
            env = uniform_environment(T, seed=10_000 + rep)
            trajectory = run_f_exp4p(env, roster, params, seed=rep)
            recs = np.array([roster.recommendations(x, 2) for x in trajectory.covariates])
            welfares = np.einsum('tik,tk->i', recs, trajectory.counterfactuals)
            regret = float(welfares.max()) - float(trajectory.realized.sum())
            exceed += regret > bound
        allowance = delta + 3 * math.sqrt(delta * (1 - delta) / replications)
        self.assertLessEqual(exceed / replications, allowance)
