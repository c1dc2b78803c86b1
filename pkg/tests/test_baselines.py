import numpy as np
import pytest

import retention.baselines as baselines
from retention.baselines import (BaselineConfig, build_problem, mean_ce, rm_grad, rm_objective, run_baseline,
                                 wccl_grad, wccl_objective)
from retention.errors import ConfigError, EstimatorError
from retention.losses import PairSet, grad_F, objective_F
from retention.optimizer import RetentionProblem, SolverConfig
from testkit import oracles


@pytest.fixture
def task_pairs():
    rng = np.random.default_rng(21)
    return [PairSet(rng.normal(size=(6, 5)), rng.normal(size=(6, 4)), np.arange(4)) for _ in range(2)]


@pytest.fixture
def retention_problem(params, pair_set, constraint_specs):
    return RetentionProblem(params.layout, pair_set, constraint_specs)


def one_exact_step(**overrides) -> SolverConfig:
    data = dict(iterations=1, eta=0.1, gamma1=1.0, theta=1.0, tau=0.5, log_every=1, task_batch=None)
    data.update(overrides)
    return SolverConfig(**data)


class TestRegularization:

    def test_zero_weight_is_the_target_objective(self, params, pair_set, constraint_specs):
        assert rm_objective(params, pair_set, constraint_specs, 0.0) == objective_F(params, pair_set)
        np.testing.assert_array_equal(rm_grad(params, pair_set, constraint_specs, 0.0), grad_F(params, pair_set))

    def test_hand_evaluation(self, params, pair_set, constraint_specs, monkeypatch):
        monkeypatch.setattr(baselines, 'objective_F', lambda p, pairs, tau: 1.0)
        monkeypatch.setattr(baselines, 'mean_ce', lambda p, spec: 0.7)
        assert rm_objective(params, pair_set, constraint_specs[:1], 10.0) == pytest.approx(8.0)

    def test_reference_losses_do_not_enter(self, params, pair_set, constraint_specs):
        alpha = 2.5
        expected = objective_F(params, pair_set) + alpha * np.mean([mean_ce(params, s) for s in constraint_specs])
        assert rm_objective(params, pair_set, constraint_specs, alpha) == pytest.approx(expected, rel=1e-12)

    def test_gradient_matches_finite_differences(self, params, pair_set, constraint_specs):
        def f(flat):
            return rm_objective(params.with_flat(flat), pair_set, constraint_specs, 3.0, 0.5)

        report = oracles.compare('rm_grad', oracles.finite_diff_grad(f, params.flat),
                                 rm_grad(params, pair_set, constraint_specs, 3.0, 0.5), rel_tol=1e-6)
        assert report.passed, report

    def test_negative_weight(self, params, pair_set, constraint_specs):
        with pytest.raises(ConfigError):
            rm_objective(params, pair_set, constraint_specs, -1.0)


class TestWeightedContrastive:

    def test_endpoints(self, params, pair_set, task_pairs):
        protected = np.mean([objective_F(params, pairs) for pairs in task_pairs])
        assert wccl_objective(params, task_pairs, pair_set, 1.0) == pytest.approx(protected, rel=1e-12)
        assert wccl_objective(params, [], pair_set, 0.0) == objective_F(params, pair_set)

    def test_weighted_sum(self, params, pair_set, task_pairs):
        alpha = 0.3
        expected = alpha * np.mean([objective_F(params, pairs) for pairs in task_pairs]) \
            + (1 - alpha) * objective_F(params, pair_set)
        assert wccl_objective(params, task_pairs, pair_set, alpha) == pytest.approx(expected, rel=1e-12)

    def test_gradient_matches_finite_differences(self, params, pair_set, task_pairs):
        def f(flat):
            return wccl_objective(params.with_flat(flat), task_pairs, pair_set, 0.6, 0.5)

        report = oracles.compare('wccl_grad', oracles.finite_diff_grad(f, params.flat),
                                 wccl_grad(params, task_pairs, pair_set, 0.6, 0.5), rel_tol=1e-6)
        assert report.passed, report

    def test_weight_range(self, params, pair_set, task_pairs):
        with pytest.raises(ConfigError):
            wccl_objective(params, task_pairs, pair_set, 1.5)
        with pytest.raises(EstimatorError):
            wccl_objective(params, [], pair_set, 0.5)


class TestBaselineRuns:

    def test_finetune_takes_a_target_gradient_step(self, params, retention_problem, pair_set):
        result = run_baseline(BaselineConfig('finetune', 0.0), one_exact_step(), retention_problem, params)
        expected = params.flat - 0.1 * grad_F(params, pair_set, 0.5)
        report = oracles.compare('step', expected, result.final.flat, rel_tol=1e-12)
        assert report.passed, report

    def test_rm_takes_a_regularized_step(self, params, retention_problem, pair_set, constraint_specs):
        config = BaselineConfig('rm', 4.0)
        result = run_baseline(config, one_exact_step(), retention_problem, params)
        expected = params.flat - 0.1 * rm_grad(params, pair_set, constraint_specs, 4.0, 0.5)
        report = oracles.compare('step', expected, result.final.flat, rel_tol=1e-12)
        assert report.passed, report
        assert all(r.effective_weights == (4.0, 4.0) for r in result.trajectory)

    def test_wccl_takes_a_mixed_step(self, params, retention_problem, pair_set, task_pairs):
        result = run_baseline(BaselineConfig('wccl', 0.25), one_exact_step(), retention_problem, params, task_pairs)
        expected = params.flat - 0.1 * wccl_grad(params, task_pairs, pair_set, 0.25, 0.5)
        report = oracles.compare('step', expected, result.final.flat, rel_tol=1e-12)
        assert report.passed, report
        assert result.trajectory[0].effective_weights == (0.125, 0.125)

    def test_zero_weight_rm_matches_finetune(self, params, retention_problem):
        config = SolverConfig(iterations=6, eta=0.05, batch_size=2, text_negatives=3, image_negatives=3, tau=0.5,
                              log_every=3, seed=8)
        rm = run_baseline(BaselineConfig('rm', 0.0), config, retention_problem, params)
        finetune = run_baseline(BaselineConfig('finetune', 0.0), config, retention_problem, params)
        np.testing.assert_array_equal(rm.final.flat, finetune.final.flat)

    def test_trajectory_reports_target_objective(self, params, retention_problem, pair_set):
        result = run_baseline(BaselineConfig('rm', 1.0), one_exact_step(iterations=2), retention_problem, params)
        first = result.trajectory[0]
        assert first.objective == pytest.approx(objective_F(params, pair_set, 0.5), rel=1e-12)
        assert len(first.h) == 2

    def test_wccl_needs_task_pairs(self, retention_problem):
        with pytest.raises(ConfigError):
            build_problem(BaselineConfig('wccl', 0.5), retention_problem)


class TestBaselineConfig:

    @pytest.mark.parametrize('kind, alpha', [('rm', -0.1), ('wccl', 1.2), ('ewc', 1.0), ('rm', float('nan'))])
    def test_invalid(self, kind, alpha):
        with pytest.raises(ConfigError):
            BaselineConfig(kind, alpha)

    def test_from_dict(self):
        assert BaselineConfig.from_dict({'kind': 'wccl', 'alpha': 0.9}) == BaselineConfig('wccl', 0.9)
        with pytest.raises(ConfigError):
            BaselineConfig.from_dict({'kind': 'rm', 'weight': 1.0})
