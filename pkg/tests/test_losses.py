import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from retention.errors import EstimatorError, ShapeError
from retention.losses import (ConstraintSpec, PairContext, PairSet, ce_loss, ce_terms, constraint_h, constraint_terms,
                              contrastive_pair_loss, g1, g2, grad_F, grad_h, grad_Phi, objective_F, pair_terms,
                              penalty_Phi, positive_part, value_and_grad_F, zero_one_loss)
from retention.model import ModelShape, encode_image, encode_text, init_params, logits
from testkit import oracles
from tests.conftest import random_params


def two_sided_softmax_loss(p, pairs, i, tau):
    """Image-to-text plus text-to-image log-softmax losses of pair i, evaluated term by term."""
    a = pairs.anchors[i]
    pool = pairs.pool_indices(i)
    e_a = encode_image(p, pairs.images[a])
    t_a = encode_text(p, pairs.texts[a])
    text_scores = [float(e_a @ encode_text(p, pairs.texts[j])) / tau for j in pool]
    image_scores = [float(t_a @ encode_image(p, pairs.images[j])) / tau for j in pool]
    positive = float(e_a @ t_a) / tau
    total = 0.0
    for scores in (text_scores, image_scores):
        top = max(scores)
        log_sum = top + math.log(math.fsum(math.exp(s - top) for s in scores))
        total += -tau * (positive - log_sum)
    return total


class TestContrastive:

    def test_self_only_pools_give_zero_loss(self, params, rng):
        pairs = PairSet(rng.normal(size=(4, 5)), rng.normal(size=(4, 4)), [1], pool=[1])
        ctx = PairContext(pairs, 0)
        assert g1(params, ctx) == 1.0
        assert g2(params, ctx) == 1.0
        assert contrastive_pair_loss(params, ctx) == 0.0

    def test_singleton_subset_is_one(self, params, pair_set):
        ctx = PairContext(pair_set, 2)
        assert g1(params, ctx, subset=np.array([pair_set.anchors[2]])) == 1.0
        assert g2(params, ctx, subset=np.array([pair_set.anchors[2]])) == 1.0

    def test_identical_texts_give_one(self, params, rng):
        texts = np.repeat(rng.normal(size=(1, 4)), 5, axis=0)
        pairs = PairSet(rng.normal(size=(5, 5)), texts, np.arange(3))
        np.testing.assert_allclose(pair_terms(params, pairs).g1, 1.0, rtol=1e-12)

    @pytest.mark.parametrize('tau', [0.1, 0.5])
    def test_matches_two_sided_log_softmax(self, params, pair_set, tau):
        for i in range(pair_set.n_pairs):
            loss = contrastive_pair_loss(params, PairContext(pair_set, i), tau)
            expected = two_sided_softmax_loss(params, pair_set, i, tau)
            # the mean-form pools differ from the sum form by τ·log|pool| on each side
            shift = 2 * tau * math.log(pair_set.pool_size(i))
            assert loss + shift == pytest.approx(expected, rel=1e-10, abs=1e-12)

    def test_g_matches_direct_summation(self, params, pair_set):
        tau = 0.2
        subset = np.array([0, 3, 6, 7])
        ctx = PairContext(pair_set, 1)
        a = pair_set.anchors[1]
        e_a = encode_image(params, pair_set.images[a])
        t_a = encode_text(params, pair_set.texts[a])
        positive = float(e_a @ t_a)
        terms = [math.exp((float(e_a @ encode_text(params, pair_set.texts[j])) - positive) / tau) for j in subset[::-1]]
        assert g1(params, ctx, subset, tau) == pytest.approx(oracles.compensated_sum(terms) / subset.size, rel=1e-12)

    def test_subset_outside_pool_is_rejected(self, params, rng):
        pairs = PairSet(rng.normal(size=(4, 5)), rng.normal(size=(4, 4)), [0, 1], pool=[0, 1, 2])
        with pytest.raises(EstimatorError):
            g1(params, PairContext(pairs, 0), subset=np.array([3]))
        with pytest.raises(EstimatorError):
            g1(params, PairContext(pairs, 0), subset=np.array([], dtype=np.int64))

    def test_groups_remove_same_group_rows(self, rng):
        pairs = PairSet(rng.normal(size=(6, 5)), rng.normal(size=(6, 4)), [0, 2], groups=[0, 0, 1, 1, 2, 2])
        np.testing.assert_array_equal(pairs.pool_indices(0), [0, 2, 3, 4, 5])
        np.testing.assert_array_equal(pairs.pool_indices(1), [0, 1, 2, 4, 5])
        assert pairs.min_pool_size() == 5

    def test_objective_is_mean_of_pair_losses(self, params, pair_set):
        losses = [contrastive_pair_loss(params, PairContext(pair_set, i)) for i in range(pair_set.n_pairs)]
        assert objective_F(params, pair_set) == pytest.approx(oracles.compensated_sum(losses) / len(losses), rel=1e-12)

    def test_duplicated_pair_keeps_objective(self, params, rng):
        X, T = rng.normal(size=(1, 5)), rng.normal(size=(1, 4))
        single = PairSet(X, T, [0])
        double = PairSet(np.vstack([X, X]), np.vstack([T, T]), [0, 1], pool=[0, 1])
        assert objective_F(params, single) == 0.0
        # the duplicate scores exactly like the positive
        assert objective_F(params, double) == pytest.approx(0.0, abs=1e-15)

    def test_grad_F_matches_finite_differences(self, params, pair_set):
        def f(flat):
            return objective_F(params.with_flat(flat), pair_set, 0.5)

        report = oracles.compare('grad_F', oracles.finite_diff_grad(f, params.flat), grad_F(params, pair_set, 0.5),
                                 rel_tol=1e-6)
        assert report.passed, report
        value, gradient = value_and_grad_F(params, pair_set, 0.5)
        assert value == objective_F(params, pair_set, 0.5)
        np.testing.assert_array_equal(gradient, grad_F(params, pair_set, 0.5))

    def test_pair_texts_do_not_touch_heads(self, params, pair_set):
        gradient = grad_F(params, pair_set)
        assert not np.any(gradient[params.layout.head_mask()])

    def test_bad_tau(self, params, pair_set):
        with pytest.raises(ShapeError):
            objective_F(params, pair_set, 0.0)


class TestCrossEntropy:

    def test_equal_logits_give_log_classes(self, flat_shape, rng):
        p = init_params(flat_shape, np.random.default_rng(0))
        class_texts = np.repeat(rng.normal(size=(1, 4)), 3, axis=0)
        assert ce_loss(p, rng.normal(size=5), 1, class_texts, 0.05) == pytest.approx(math.log(3), rel=1e-12)

    def test_saturated_softmax(self, flat_shape):
        p = init_params(flat_shape, np.random.default_rng(0))
        x = np.array([1.0, 0.5, -0.3, 0.2, 0.9])
        class_texts = np.random.default_rng(8).normal(size=(3, 4))
        scores = logits(p, x, class_texts)
        best = int(np.argmax(scores))
        gap = np.sort(scores)[-1] - np.sort(scores)[-2]
        tau0 = gap / 60.0
        assert ce_loss(p, x, best, class_texts, tau0) <= 1e-20

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.sampled_from([0.05, 0.2, 1.0]))
    def test_matches_log_sum_exp_oracle(self, seed, tau0):
        rng = np.random.default_rng(seed)
        shape = ModelShape(d_x=5, d_t=4, d_1=4, d_2=3, num_tasks=3)
        p = random_params(shape, seed=seed % 1000)
        class_texts = rng.normal(size=(3, 4))
        x = rng.normal(size=5)
        y = int(rng.integers(3))
        z = [float(s) / tau0 for s in logits(p, x, class_texts)]
        top = max(z)
        expected = top + math.log(math.fsum(math.exp(v - top) for v in z)) - z[y]
        assert ce_loss(p, x, y, class_texts, tau0) == pytest.approx(max(expected, 0.0), rel=1e-12, abs=1e-14)

    def test_zero_one_loss(self, params, class_texts, rng):
        x = rng.normal(size=5)
        label = int(np.argmax(logits(params, x, class_texts)))
        assert zero_one_loss(params, x, label, class_texts) == 0
        assert zero_one_loss(params, x, (label + 1) % 3, class_texts) == 1

    def test_ce_gradient_matches_finite_differences(self, params, class_texts, rng):
        X = rng.normal(size=(4, 5))
        y = np.array([0, 1, 2, 1])
        coefs = rng.normal(size=4)
        terms = ce_terms(params, X, y, class_texts, 0.5)

        def f(flat):
            return float(coefs @ ce_terms(params.with_flat(flat), X, y, class_texts, 0.5).values)

        np.testing.assert_allclose(terms.vjp(coefs), oracles.finite_diff_grad(f, params.flat), rtol=1e-6, atol=1e-9)

    def test_label_out_of_range(self, params, class_texts, rng):
        with pytest.raises(ShapeError):
            ce_terms(params, rng.normal(size=(2, 5)), [0, 3], class_texts, 0.5)


class TestConstraints:

    def test_reference_model_is_exactly_feasible(self, params, class_texts, rng):
        spec = ConstraintSpec.build(params, 1, rng.normal(size=(5, 5)), class_texts, 0.5)
        assert constraint_h(params, spec) == 0.0
        assert constraint_h(params, spec, [2]) == pytest.approx(0.0, abs=1e-15)

    def test_reference_losses_are_frozen(self, params, class_texts, rng):
        spec = ConstraintSpec.build(params, 1, rng.normal(size=(5, 5)), class_texts, 0.5)
        with pytest.raises(ValueError):
            spec.reference_losses[0] = 0.0

    def test_single_sample_subset(self, params, constraint_specs):
        spec = constraint_specs[0]
        live = ce_loss(params, spec.X[3], spec.task, spec.class_texts, spec.tau0)
        assert constraint_h(params, spec, [3]) == pytest.approx(live - spec.reference_losses[3], rel=1e-12, abs=1e-15)

    def test_empty_subset(self, params, constraint_specs):
        with pytest.raises(EstimatorError):
            constraint_h(params, constraint_specs[0], [])

    def test_batched_terms_match_single_constraints(self, params, constraint_specs):
        terms = constraint_terms(params, constraint_specs, [1, 0], [None, [0, 2]])
        assert terms.values[0] == pytest.approx(constraint_h(params, constraint_specs[1]), rel=1e-12, abs=1e-15)
        assert terms.values[1] == pytest.approx(constraint_h(params, constraint_specs[0], [0, 2]), rel=1e-12, abs=1e-15)

    def test_grad_h_at_reference_is_mean_ce_gradient(self, params, class_texts, rng):
        X = rng.normal(size=(5, 5))
        spec = ConstraintSpec.build(params, 2, X, class_texts, 0.5)
        terms = ce_terms(params, X, np.full(5, 2), class_texts, 0.5)
        np.testing.assert_allclose(grad_h(params, spec), terms.vjp(np.full(5, 0.2)), rtol=1e-12, atol=1e-15)

    def test_grad_h_matches_finite_differences(self, params, constraint_specs):
        spec = constraint_specs[1]

        def f(flat):
            return constraint_h(params.with_flat(flat), spec)

        report = oracles.compare('grad_h', oracles.finite_diff_grad(f, params.flat), grad_h(params, spec), rel_tol=1e-6)
        assert report.passed, report


class TestPenalty:

    def test_inactive_penalty(self, params, pair_set, constraint_specs):
        F = objective_F(params, pair_set)
        assert penalty_Phi(params, pair_set, constraint_specs, 0.0) == F
        assert penalty_Phi(params, pair_set, [], 10.0) == F

    def test_penalty_dominates_objective(self, params, pair_set, constraint_specs):
        h = np.array([constraint_h(params, spec) for spec in constraint_specs])
        Phi = penalty_Phi(params, pair_set, constraint_specs, 100.0)
        F = objective_F(params, pair_set)
        assert Phi >= F
        assert (Phi == F) == bool(np.all(h <= 0))

    def test_gradient_is_assembled_from_parts(self, params, pair_set, constraint_specs):
        beta = 50.0
        h = np.array([constraint_h(params, spec) for spec in constraint_specs])
        parts = grad_F(params, pair_set)
        for spec, value in zip(constraint_specs, positive_part(h)):
            parts = parts + (beta / len(constraint_specs)) * value * grad_h(params, spec)
        report = oracles.compare('grad_Phi', parts, grad_Phi(params, pair_set, constraint_specs, beta), rel_tol=1e-12)
        assert report.passed, report

    def test_gradient_matches_finite_differences(self, params, pair_set, constraint_specs):
        beta = 20.0

        def f(flat):
            return penalty_Phi(params.with_flat(flat), pair_set, constraint_specs, beta, 0.5)

        report = oracles.compare('grad_Phi', oracles.finite_diff_grad(f, params.flat),
                                 grad_Phi(params, pair_set, constraint_specs, beta, 0.5), rel_tol=1e-6)
        assert report.passed, report

    def test_negative_beta(self, params, pair_set, constraint_specs):
        with pytest.raises(ShapeError):
            penalty_Phi(params, pair_set, constraint_specs, -1.0)
