"""Tests for Fisher-importance and activation-overlap analysis.

Oracles: single-sample Fisher equals the squared analytic gradient exactly;
multi-sample values are recomputed as explicit means; the effective-weight
gradient is recomputed from the dense reconstruction; overlap counts are
recomputed with Python set logic.
"""

from collections import Counter

import numpy as np
import pytest

from orthoexperts import (
    ExpertBank,
    GATE_SCALAR,
    GATE_TOPK,
    InvalidParameterError,
    MoeLoraLayer,
    ValidationError,
    activated_neurons,
    backward,
    build_layer,
    fisher_diagonal,
    forward,
    make_tasks,
    overlap_report,
    reconstruct,
    weight_gradient_stats,
)


def tiny_layer(gate_mode=GATE_SCALAR, seed=0):
    ts = make_tasks(
        t=2, n=8, m=6, rank=2, noise=0.05, seed=seed, train_count=12, eval_count=12
    )
    top_k = 2 if gate_mode == GATE_TOPK else None
    layer = build_layer(ts, k=2, r=2, gate_mode=gate_mode, top_k=top_k)
    return layer, ts.tasks[0].x_train, ts.tasks[0].y_train


def diag_residual_layer(residual):
    """A layer whose forward map is exactly ``residual @ x`` (zero experts)."""
    residual = np.asarray(residual, dtype=np.float64)
    m, n = residual.shape
    bank = ExpertBank(
        residual=residual,
        experts=[(np.zeros((m, 1)), np.zeros((1, n)))],
        routing=np.ones(1),
        scale=1.0,
        k=1,
        r=1,
    )
    return MoeLoraLayer(bank=bank)


class TestFisherDiagonal:
    def test_single_sample_is_squared_gradient(self):
        layer, x_data, y_data = tiny_layer()
        x, y = x_data[0], y_data[0]
        grads = backward(layer, x, forward(layer, x) - y)
        fisher = fisher_diagonal(layer, x[np.newaxis], y[np.newaxis])
        for k in range(2):
            assert np.array_equal(fisher.a[k], grads.grad_a[k] ** 2)
            assert np.array_equal(fisher.b[k], grads.grad_b[k] ** 2)
        assert np.array_equal(fisher.alpha, grads.grad_alpha**2)
        assert fisher.router is None

    @pytest.mark.parametrize("gate_mode", [GATE_SCALAR, GATE_TOPK])
    def test_mean_of_squared_gradients(self, gate_mode):
        layer, x_data, y_data = tiny_layer(gate_mode)
        fisher = fisher_diagonal(layer, x_data, y_data)
        per_sample = [
            backward(layer, x, forward(layer, x) - y)
            for x, y in zip(x_data, y_data)
        ]
        for k in range(2):
            expected = np.mean([g.grad_a[k] ** 2 for g in per_sample], axis=0)
            assert np.allclose(fisher.a[k], expected, rtol=1e-12, atol=1e-15)
            expected = np.mean([g.grad_b[k] ** 2 for g in per_sample], axis=0)
            assert np.allclose(fisher.b[k], expected, rtol=1e-12, atol=1e-15)
        expected = np.mean([g.grad_alpha**2 for g in per_sample], axis=0)
        assert np.allclose(fisher.alpha, expected, rtol=1e-12, atol=1e-15)
        if gate_mode == GATE_TOPK:
            expected = np.mean([g.grad_router**2 for g in per_sample], axis=0)
            assert np.allclose(fisher.router, expected, rtol=1e-12, atol=1e-15)

    def test_perfect_fit_gives_zero_fisher(self):
        layer, x_data, _ = tiny_layer()
        y_data = np.array([forward(layer, x) for x in x_data])
        fisher = fisher_diagonal(layer, x_data, y_data)
        assert not fisher.flattened().any()

    def test_fisher_nonnegative(self):
        layer, x_data, y_data = tiny_layer()
        fisher = fisher_diagonal(layer, x_data, y_data)
        assert np.all(fisher.flattened() >= 0.0)

    def test_flattened_layout(self):
        layer, x_data, y_data = tiny_layer()
        fisher = fisher_diagonal(layer, x_data, y_data)
        flat = fisher.flattened()
        sizes = [g.size for g in fisher.a] + [g.size for g in fisher.b]
        sizes.append(fisher.alpha.size)
        assert flat.size == sum(sizes)
        assert np.array_equal(flat[: fisher.a[0].size], fisher.a[0].ravel())

    def test_validation(self):
        layer, x_data, y_data = tiny_layer()
        with pytest.raises(ValidationError):
            fisher_diagonal(layer, x_data[:0], y_data[:0])
        with pytest.raises(ValidationError):
            fisher_diagonal(layer, x_data[:3], y_data[:2])


class TestWeightGradientStats:
    def test_matches_dense_reconstruction_oracle(self):
        """Per-sample effective-weight gradient is (W_eff x - y) x^T with
        W_eff the dense reconstruction; stats are their means."""
        layer, x_data, y_data = tiny_layer()
        fisher_w, mean_grad = weight_gradient_stats(layer, x_data, y_data)
        w_eff = reconstruct(layer.bank)
        gs = [np.outer(w_eff @ x - y, x) for x, y in zip(x_data, y_data)]
        assert np.allclose(
            fisher_w, np.mean([g**2 for g in gs], axis=0), rtol=1e-10, atol=1e-12
        )
        assert np.allclose(
            mean_grad, np.mean(gs, axis=0), rtol=1e-10, atol=1e-12
        )

    def test_single_sample_fisher_is_squared_mean(self):
        layer, x_data, y_data = tiny_layer()
        fisher_w, mean_grad = weight_gradient_stats(
            layer, x_data[:1], y_data[:1]
        )
        assert np.array_equal(fisher_w, mean_grad**2)

    def test_entrywise_double_loop(self):
        layer, x_data, y_data = tiny_layer()
        x, y = x_data[0], y_data[0]
        fisher_w, mean_grad = weight_gradient_stats(
            layer, x[np.newaxis], y[np.newaxis]
        )
        h = forward(layer, x)
        for i in range(layer.bank.m):
            for j in range(layer.bank.n):
                g = (h[i] - y[i]) * x[j]
                assert mean_grad[i, j] == pytest.approx(g, rel=1e-12, abs=1e-15)
                assert fisher_w[i, j] == pytest.approx(g * g, rel=1e-12, abs=1e-15)

    def test_perfect_fit_gives_zeros(self):
        layer, x_data, _ = tiny_layer()
        y_data = np.array([forward(layer, x) for x in x_data])
        fisher_w, mean_grad = weight_gradient_stats(layer, x_data, y_data)
        assert not fisher_w.any()
        assert not mean_grad.any()

    def test_validation(self):
        layer, x_data, y_data = tiny_layer()
        with pytest.raises(ValidationError):
            weight_gradient_stats(layer, x_data[:0], y_data[:0])


class TestActivatedNeurons:
    def test_crafted_mask(self):
        layer = diag_residual_layer([[1.0, 0.0], [0.0, 0.0]])
        x_data = np.array([[1.0, 0.0], [1.0, 0.0]])
        # mean activation is exactly (1.0, 0.0)
        assert activated_neurons(layer, x_data, eps=0.1).tolist() == [True, False]

    def test_threshold_is_strict(self):
        layer = diag_residual_layer([[1.0, 0.0], [0.0, 0.0]])
        x_data = np.array([[1.0, 0.0]])
        assert activated_neurons(layer, x_data, eps=1.0).tolist() == [False, False]

    def test_magnitude_not_sign(self):
        layer = diag_residual_layer([[-2.0, 0.0], [0.0, 0.5]])
        x_data = np.array([[1.0, 1.0]])
        assert activated_neurons(layer, x_data, eps=1.0).tolist() == [True, False]

    def test_matches_recomputed_means(self):
        layer, x_data, _ = tiny_layer()
        mean_h = np.mean([forward(layer, x) for x in x_data], axis=0)
        eps = float(np.median(np.abs(mean_h)))
        got = activated_neurons(layer, x_data, eps)
        assert np.array_equal(got, np.abs(mean_h) > eps)

    def test_validation(self):
        layer, x_data, _ = tiny_layer()
        with pytest.raises(InvalidParameterError):
            activated_neurons(layer, x_data, eps=0.0)
        with pytest.raises(InvalidParameterError):
            activated_neurons(layer, x_data, eps=-1.0)
        with pytest.raises(ValidationError):
            activated_neurons(layer, x_data[:0], eps=0.1)


class TestOverlapReport:
    def test_identical_tasks_share_everything(self):
        mask = np.array([[True, False, True]] * 4)
        report = overlap_report(mask)
        assert report.unit_task_counts.tolist() == [4, 0, 4]
        assert report.histogram.tolist() == [1, 0, 0, 0, 2]

    def test_disjoint_tasks_share_nothing(self):
        mask = np.zeros((3, 4), dtype=bool)
        for t in range(3):
            mask[t, t] = True
        report = overlap_report(mask)
        assert report.unit_task_counts.tolist() == [1, 1, 1, 0]
        assert report.histogram.tolist() == [1, 3, 0, 0]

    def test_counts_match_set_logic(self):
        rng = np.random.default_rng(7)
        mask = rng.random((4, 12)) < 0.4
        report = overlap_report(mask)
        for unit in range(12):
            owners = {t for t in range(4) if mask[t, unit]}
            assert report.unit_task_counts[unit] == len(owners)
        hist = Counter(int(c) for c in report.unit_task_counts)
        assert report.histogram.tolist() == [hist.get(c, 0) for c in range(5)]

    def test_float_input_selects_top_fraction(self):
        units = np.array([[4.0, 3.0, 2.0, 1.0], [1.0, 2.0, 3.0, 4.0]])
        report = overlap_report(units, keep_fraction=0.5)
        assert report.selected.tolist() == [
            [True, True, False, False],
            [False, False, True, True],
        ]
        assert report.unit_task_counts.tolist() == [1, 1, 1, 1]

    def test_float_ties_break_to_lower_index(self):
        units = np.array([[5.0, 5.0, 5.0, 1.0], [1.0, 5.0, 5.0, 5.0]])
        report = overlap_report(units, keep_fraction=0.5)
        assert report.selected.tolist() == [
            [True, True, False, False],
            [False, True, True, False],
        ]

    def test_keep_count_ceils(self):
        units = np.array([[5.0, 4.0, 3.0, 2.0, 1.0], [1.0, 2.0, 3.0, 4.0, 5.0]])
        report = overlap_report(units, keep_fraction=0.3)  # ceil(1.5) = 2
        assert report.selected.sum(axis=1).tolist() == [2, 2]

    def test_keep_fraction_one_selects_all(self):
        units = np.array([[1.0, 2.0], [2.0, 1.0]])
        report = overlap_report(units, keep_fraction=1.0)
        assert report.selected.all()

    def test_keep_fraction_validation(self):
        units = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(InvalidParameterError):
            overlap_report(units)
        with pytest.raises(InvalidParameterError):
            overlap_report(units, keep_fraction=0.0)
        with pytest.raises(InvalidParameterError):
            overlap_report(units, keep_fraction=1.2)

    def test_bool_input_ignores_keep_fraction(self):
        mask = np.array([[True, False], [True, True]])
        report = overlap_report(mask)
        assert report.selected is mask

    def test_sign_splits(self):
        mask = np.array([[True, True, True], [True, True, True]])
        grads = np.array(
            [
                [[1.0, 1.0], [-1.0, -1.0], [0.0, 0.0]],
                [[2.0, 0.0], [1.0, 1.0], [0.0, 0.0]],
            ]
        )
        report = overlap_report(mask, mean_grads=grads)
        assert report.positive_counts.tolist() == [2, 1, 0]
        assert report.negative_counts.tolist() == [0, 1, 0]

    def test_sign_splits_absent_without_grads(self):
        report = overlap_report(np.array([[True], [False]]))
        assert report.positive_counts is None
        assert report.negative_counts is None

    def test_mean_grads_shape_checked(self):
        mask = np.array([[True, True], [False, True]])
        with pytest.raises(ValidationError):
            overlap_report(mask, mean_grads=np.zeros((3, 2, 2)))
        with pytest.raises(ValidationError):
            overlap_report(mask, mean_grads=np.zeros((2, 4)))

    def test_input_shape_checked(self):
        with pytest.raises(ValidationError):
            overlap_report(np.zeros(3, dtype=bool))
        with pytest.raises(ValidationError):
            overlap_report(np.array([[True, False]]))
