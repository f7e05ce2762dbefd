"""Tests for the graph-convolutional predictor and its hand-written gradients."""
import os
import shutil
import tempfile
import unittest
from dataclasses import replace

import numpy as np
import pytest

from cellsearch.exceptions import PredictorDivergedError
from cellsearch.predictor import (
    GraphBatch,
    PredictorParams,
    TrainConfig,
    backward,
    evaluate_ranking,
    forward,
    forward_logits,
    gcn_layer,
    load_params,
    loss,
    normalized_adjacency,
    predict,
    predict_learning_curve,
    rank_candidates,
    save_params,
    suggest_budget,
    train,
)
from cellsearch.search_space import CellGraph, GeneralizedOp, SearchSpace, sample_skip_pattern

SMALL = TrainConfig(layers=2, d_emb=4, d_ep=3, hidden=5, mlp_widths=(6, 4), n_budget_levels=3)


def random_cells(rng, n_cells, sizes=(5,)):
    cells = []
    for _ in range(n_cells):
        n = int(rng.choice(sizes))
        skip = sample_skip_pattern(n, rng)
        ops = tuple(GeneralizedOp.from_index(int(i)) for i in rng.integers(0, 156, size=n))
        cells.append(CellGraph(skip, ops))
    return cells


def perturbed_params(config, rng):
    """Initialized params with non-trivial biases, batch-norm affine terms and running statistics."""
    params = PredictorParams.initialize(config, rng)
    for name, tensor in params.tensors.items():
        if name.startswith(("mlp_b", "bn_beta")):
            tensor += rng.normal(0.0, 0.3, tensor.shape)
        elif name.startswith("bn_gamma"):
            tensor += rng.normal(0.0, 0.2, tensor.shape)
    for name, buffer in params.buffers.items():
        if name.startswith("bn_mean"):
            buffer += rng.normal(0.0, 0.5, buffer.shape)
        else:
            buffer *= rng.uniform(0.5, 2.0, buffer.shape)
    return params


def reference_forward(params, cell, epoch_index):
    """Plain-loop re-implementation of the inference-mode forward pass for one cell."""
    cfg = params.config
    t = params.tensors
    n = cell.n_nodes
    a = [[1.0 if i == j else float(cell.skip.adjacency[i, j]) for j in range(n)] for i in range(n)]
    deg = [sum(row) for row in a]
    a_hat = [[a[i][j] / np.sqrt(deg[i] * deg[j]) for j in range(n)] for i in range(n)]
    h = [t["op_embedding"][g.index].copy() for g in cell.ops]
    for k in range(cfg.layers):
        w = t[f"gcn_{k}"]
        new_h = []
        for i in range(n):
            agg = np.zeros_like(h[0])
            for j in range(n):
                agg = agg + a_hat[i][j] * h[j]
            new_h.append(np.maximum(agg @ w, 0.0))
        h = new_h
    readout = np.array([max(h[i][c] for i in range(n)) for c in range(cfg.hidden)])
    u = np.concatenate([readout, t["epoch_embedding"][epoch_index]])
    for i in range(2):
        z = u @ t[f"mlp_w{i}"] + t[f"mlp_b{i}"]
        mean, var = params.buffers[f"bn_mean{i}"], params.buffers[f"bn_var{i}"]
        y = t[f"bn_gamma{i}"] * (z - mean) / np.sqrt(var + cfg.bn_eps) + t[f"bn_beta{i}"]
        u = np.maximum(y, 0.0)
    logit = float(u @ t["mlp_w2"][:, 0] + t["mlp_b2"][0])
    return 1.0 / (1.0 + np.exp(-logit))


@pytest.mark.unit
class TestGCNLayer(unittest.TestCase):
    def test_no_edges_is_plain_linear(self):
        rng = np.random.default_rng(0)
        h = rng.normal(size=(3, 4))
        w = rng.normal(size=(4, 2))
        np.testing.assert_allclose(gcn_layer(h, np.zeros((3, 3)), w), np.maximum(h @ w, 0.0), atol=1e-15)

    def test_two_clique_normalization(self):
        adjacency = np.array([[0, 1], [1, 0]])
        np.testing.assert_allclose(normalized_adjacency(adjacency), np.full((2, 2), 0.5))
        np.testing.assert_allclose(gcn_layer(np.eye(2), adjacency, np.eye(2)), np.full((2, 2), 0.5))

    def test_output_non_negative(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            adjacency = sample_skip_pattern(5, rng).adjacency
            out = gcn_layer(rng.normal(size=(5, 3)), adjacency, rng.normal(size=(3, 4)))
            self.assertTrue((out >= 0.0).all())

    def test_shape_mismatch(self):
        with self.assertRaises(ValueError):
            gcn_layer(np.ones((3, 4)), np.zeros((2, 2)), np.ones((4, 2)))
        with self.assertRaises(ValueError):
            gcn_layer(np.ones((2, 4)), np.zeros((2, 2)), np.ones((3, 2)))

    def test_asymmetric_adjacency_rejected(self):
        with self.assertRaises(ValueError):
            normalized_adjacency(np.array([[0, 1], [0, 0]]))


@pytest.mark.unit
class TestForward(unittest.TestCase):
    def test_permutation_invariance(self):
        rng = np.random.default_rng(2)
        params = perturbed_params(TrainConfig(n_budget_levels=4), rng)
        cells = random_cells(rng, 100, sizes=(5, 6, 7))
        permuted = [c.permuted(rng.permutation(c.n_nodes)) for c in cells]
        epochs = rng.integers(0, 4, size=len(cells))
        original = forward(params, GraphBatch.from_cells(cells, epochs))
        shuffled = forward(params, GraphBatch.from_cells(permuted, epochs))
        np.testing.assert_allclose(shuffled, original, rtol=0, atol=1e-10)
        logits = forward_logits(params, GraphBatch.from_cells(cells, epochs))
        np.testing.assert_allclose(forward_logits(params, GraphBatch.from_cells(permuted, epochs)), logits,
                                   rtol=0, atol=1e-10)

    def test_matches_reference_implementation(self):
        rng = np.random.default_rng(3)
        for case in range(20):
            config = replace(SMALL, layers=1 + case % 3, seed=case)
            params = perturbed_params(config, rng)
            cell = random_cells(rng, 1, sizes=(2, 3, 4, 5, 6, 7))[0]
            epoch = case % config.n_budget_levels
            got = forward(params, GraphBatch.from_cells([cell], epoch))[0]
            self.assertAlmostEqual(got, reference_forward(params, cell, epoch), delta=1e-10)

    def test_batch_grouping_preserves_order(self):
        rng = np.random.default_rng(4)
        params = perturbed_params(SMALL, rng)
        cells = random_cells(rng, 12, sizes=(3, 5, 7))
        together = forward(params, GraphBatch.from_cells(cells, 1))
        alone = np.array([forward(params, GraphBatch.from_cells([c], 1))[0] for c in cells])
        np.testing.assert_allclose(together, alone, rtol=0, atol=1e-12)

    def test_zero_weights_give_zero_logit(self):
        params = PredictorParams.initialize(SMALL)
        for tensor in params.tensors.values():
            tensor[...] = 0.0
        cells = random_cells(np.random.default_rng(5), 4)
        np.testing.assert_array_equal(forward_logits(params, GraphBatch.from_cells(cells, 0)), np.zeros(4))
        raw = PredictorParams(replace(SMALL, sigmoid_output=False), params.tensors, params.buffers)
        np.testing.assert_array_equal(forward(raw, GraphBatch.from_cells(cells, 0)), np.zeros(4))

    def test_outputs_finite_and_bounded(self):
        rng = np.random.default_rng(6)
        params = perturbed_params(TrainConfig(), rng)
        preds = forward(params, GraphBatch.from_cells(random_cells(rng, 50, sizes=(2, 4, 7)), 3))
        self.assertTrue(np.isfinite(preds).all())
        self.assertTrue(((preds >= 0.0) & (preds <= 1.0)).all())

    def test_invalid_batches(self):
        params = PredictorParams.initialize(SMALL)
        with self.assertRaises(ValueError):
            forward(params, GraphBatch([], [], []))
        cells = random_cells(np.random.default_rng(7), 2)
        with self.assertRaises(ValueError):
            forward(params, GraphBatch.from_cells(cells, SMALL.n_budget_levels))
        with self.assertRaises(ValueError):
            GraphBatch.from_cells(cells, [0])
        with self.assertRaises(ValueError):
            GraphBatch([np.zeros((2, 2))], [[0, 156]], [0])


@pytest.mark.unit
class TestLoss(unittest.TestCase):
    def test_single_element_example(self):
        params = PredictorParams.initialize(SMALL)
        params.tensors["mlp_w2"][...] = 0.0
        params.tensors["mlp_b2"][...] = 0.0
        cell = random_cells(np.random.default_rng(8), 1)[0]
        batch = GraphBatch.from_cells([cell], 0, [0.9])
        self.assertAlmostEqual(loss(params, batch), 0.16, delta=1e-12)

    def test_matches_hand_summed_mse(self):
        rng = np.random.default_rng(9)
        params = perturbed_params(SMALL, rng)
        cells = random_cells(rng, 10)
        labels = rng.uniform(size=10)
        batch = GraphBatch.from_cells(cells, 2, labels)
        preds = forward(params, batch, training=True)
        expected = sum((p - y) ** 2 for p, y in zip(preds, labels)) / len(labels)
        self.assertAlmostEqual(loss(params, batch), expected, delta=1e-12)

    def test_perfect_predictions_give_zero_loss(self):
        rng = np.random.default_rng(10)
        params = perturbed_params(SMALL, rng)
        cells = random_cells(rng, 6)
        preds = forward(params, GraphBatch.from_cells(cells, 0), training=True)
        batch = GraphBatch.from_cells(cells, 0, preds)
        self.assertEqual(loss(params, batch), 0.0)

    def test_unlabelled_batch(self):
        params = PredictorParams.initialize(SMALL)
        with self.assertRaises(ValueError):
            loss(params, GraphBatch.from_cells(random_cells(np.random.default_rng(11), 2), 0))


@pytest.mark.unit
class TestBackward(unittest.TestCase):
    @staticmethod
    def _numeric(params, batch, name, flat_index, training, eps=1e-6):
        tensor = params.tensors[name].reshape(-1)
        original = tensor[flat_index]
        tensor[flat_index] = original + eps
        plus = loss(params, batch, training)
        tensor[flat_index] = original - eps
        minus = loss(params, batch, training)
        tensor[flat_index] = original
        return (plus - minus) / (2.0 * eps)

    def _check(self, seed, training):
        rng = np.random.default_rng(seed)
        config = replace(SMALL, seed=seed)
        params = perturbed_params(config, rng)
        cells = random_cells(rng, 6, sizes=(4, 5, 6))
        batch = GraphBatch.from_cells(cells, rng.integers(0, config.n_budget_levels, size=6), rng.uniform(size=6))
        grads = backward(params, batch, training)
        used_rows = sorted({g.index for c in cells for g in c.ops})
        worst = 0.0
        for name, tensor in params.tensors.items():
            self.assertEqual(grads[name].shape, tensor.shape)
            if name == "op_embedding":
                candidates = [r * tensor.shape[1] + c for r in used_rows for c in range(tensor.shape[1])]
            else:
                candidates = list(range(tensor.size))
            picks = rng.choice(candidates, size=min(12, len(candidates)), replace=False)
            for flat in picks:
                g = grads[name].reshape(-1)[flat]
                fd = self._numeric(params, batch, name, int(flat), training)
                worst = max(worst, abs(g - fd) / max(abs(g) + abs(fd), 1e-4))
        return worst

    def test_gradient_check_training_mode(self):
        for seed in range(50):
            with self.subTest(seed=seed):
                self.assertLess(self._check(seed, training=True), 1e-4)

    def test_gradient_check_inference_mode(self):
        for seed in range(10):
            with self.subTest(seed=seed):
                self.assertLess(self._check(100 + seed, training=False), 1e-4)

    def test_zero_loss_gives_zero_gradient(self):
        rng = np.random.default_rng(12)
        params = perturbed_params(SMALL, rng)
        cells = random_cells(rng, 5)
        preds = forward(params, GraphBatch.from_cells(cells, 1), training=True)
        grads = backward(params, GraphBatch.from_cells(cells, 1, preds))
        for name, grad in grads.items():
            self.assertTrue(np.all(grad == 0.0), msg=name)

    def test_unused_embeddings_get_no_gradient(self):
        rng = np.random.default_rng(13)
        params = perturbed_params(SMALL, rng)
        cells = random_cells(rng, 4)
        grads = backward(params, GraphBatch.from_cells(cells, 0, rng.uniform(size=4)))
        used = {g.index for c in cells for g in c.ops}
        unused = [i for i in range(156) if i not in used]
        self.assertTrue(np.all(grads["op_embedding"][unused] == 0.0))
        self.assertTrue(np.all(grads["epoch_embedding"][1:] == 0.0))

    def test_losing_max_pool_node_gets_no_gradient(self):
        config = replace(SMALL, layers=1)
        params = PredictorParams.initialize(config)
        params.tensors["gcn_0"][...] = 0.0
        params.tensors["gcn_0"][0, 0] = 1.0
        strong, weak = GeneralizedOp.from_index(0), GeneralizedOp.from_index(1)
        params.tensors["op_embedding"][strong.index] = [5.0, 1.0, 0.0, 0.0]
        params.tensors["op_embedding"][weak.index] = [-5.0, 2.0, 0.0, 0.0]
        # no edges: each node keeps its own features, so the weak node never wins the max-pool
        batch = GraphBatch([np.zeros((2, 2))], [[strong.index, weak.index]], [0], [0.3])
        grads = backward(params, batch, training=False)
        self.assertTrue(np.all(grads["op_embedding"][weak.index] == 0.0))

@pytest.mark.unit
class TestTrain(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(14)
        self.cells = random_cells(rng, 40, sizes=(4, 5))
        self.labels = rng.uniform(0.5, 0.9, size=40)
        self.dataset = GraphBatch.from_cells(self.cells, 0, self.labels)

    def test_zero_learning_rate_leaves_params(self):
        config = replace(SMALL, learning_rate=0.0, epochs=3)
        params = PredictorParams.initialize(config)
        trained, trace = train(params, self.dataset, config)
        self.assertEqual(len(trace), 3)
        for name, tensor in params.tensors.items():
            np.testing.assert_array_equal(trained.tensors[name], tensor)

    def test_does_not_mutate_input(self):
        params = PredictorParams.initialize(SMALL)
        before = {k: v.copy() for k, v in params.tensors.items()}
        train(params, self.dataset, replace(SMALL, epochs=2))
        for name, tensor in before.items():
            np.testing.assert_array_equal(params.tensors[name], tensor)

    def test_duplicated_dataset_same_full_batch_loss(self):
        config = replace(SMALL, epochs=5, batch_size=1000)
        doubled = GraphBatch.from_cells(self.cells * 2, 0, np.concatenate([self.labels, self.labels]))
        _, single = train(PredictorParams.initialize(config), self.dataset, config)
        _, double = train(PredictorParams.initialize(config), doubled, config)
        np.testing.assert_allclose(double, single, rtol=1e-9, atol=1e-12)

    def test_deterministic_trace(self):
        config = replace(SMALL, epochs=4, batch_size=8)
        _, first = train(PredictorParams.initialize(config), self.dataset, config)
        _, second = train(PredictorParams.initialize(config), self.dataset, config)
        self.assertEqual(first, second)

    def test_divergence_is_reported(self):
        config = replace(SMALL, learning_rate=1e12, momentum=0.0, epochs=20, sigmoid_output=False)
        with self.assertRaises(PredictorDivergedError):
            train(PredictorParams.initialize(config), self.dataset, config)

    def test_empty_dataset(self):
        with self.assertRaises(ValueError):
            train(PredictorParams.initialize(SMALL), GraphBatch([], [], [], []), SMALL)

    def test_learns_operator_presence(self):
        space = SearchSpace.reduced(4, 3)
        rng = np.random.default_rng(15)
        marker = space.op_choices[0]
        cells = [space.sample_cell(rng) for _ in range(200)]
        labels = np.array([0.8 if marker in c.ops else 0.4 for c in cells])
        config = TrainConfig(epochs=300, n_budget_levels=1, seed=3)
        trained, trace = train(PredictorParams.initialize(config), GraphBatch.from_cells(cells, 0, labels), config)
        preds = predict(trained, cells, 0)
        self.assertLess(float(np.mean((preds - labels) ** 2)), 0.1 * float(np.var(labels)))
        self.assertLess(trace[-1], trace[0])


@pytest.mark.unit
class TestRanking(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(16)
        self.params = perturbed_params(SMALL, rng)
        self.cells = random_cells(rng, 8)

    def test_single_candidate(self):
        ranked = rank_candidates(self.params, self.cells[:1], 0)
        self.assertEqual(len(ranked), 1)
        self.assertEqual(ranked[0][0], self.cells[0])

    def test_sorted_descending(self):
        cell = self.cells[0]
        twin = cell.permuted([4, 3, 2, 1, 0])
        ranked = rank_candidates(self.params, self.cells + [twin], 2)
        scores = [s for _, s in ranked]
        self.assertEqual(scores, sorted(scores, reverse=True))
        twin_scores = predict(self.params, [cell, twin], 2)
        self.assertAlmostEqual(twin_scores[0], twin_scores[1], delta=1e-12)

    def test_ties_keep_input_order(self):
        flat = PredictorParams.initialize(SMALL)
        for tensor in flat.tensors.values():
            tensor[...] = 0.0
        ranked = rank_candidates(flat, self.cells, 0)
        self.assertEqual([c for c, _ in ranked], self.cells)
        self.assertTrue(all(s == 0.5 for _, s in ranked))

    def test_learning_curve_and_budget_suggestion(self):
        curve = predict_learning_curve(self.params, self.cells[0])
        self.assertEqual(curve.shape, (SMALL.n_budget_levels,))
        budgets = [4, 12, 36]
        suggested = suggest_budget(self.params, self.cells[0], budgets, tolerance=1.0)
        self.assertEqual(suggested, 4)
        best = budgets[int(np.argmax(curve))]
        self.assertLessEqual(suggest_budget(self.params, self.cells[0], budgets, tolerance=0.0), best)

    def test_evaluate_ranking_perfect_labels(self):
        preds = predict(self.params, self.cells, 1)
        metrics = evaluate_ranking(self.params, self.cells, preds, 1)
        self.assertAlmostEqual(metrics["kendall_tau"], 1.0)
        self.assertAlmostEqual(metrics["mse"], 0.0)
        self.assertAlmostEqual(metrics["label_variance"], float(np.var(preds)))

    def test_predict_empty(self):
        self.assertEqual(predict(self.params, [], 0).shape, (0,))


@pytest.mark.unit
class TestSerialization(unittest.TestCase):
    def setUp(self):
        self.temp_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.temp_dir)

    def test_save_load_round_trip(self):
        rng = np.random.default_rng(17)
        params = perturbed_params(SMALL, rng)
        path = save_params(params, os.path.join(self.temp_dir, "nested", "predictor.npz"))
        loaded = load_params(path)
        self.assertEqual(loaded.config, params.config)
        self.assertEqual(set(loaded.tensors), set(params.tensors))
        for name, tensor in params.tensors.items():
            np.testing.assert_array_equal(loaded.tensors[name], tensor)
        for name, buffer in params.buffers.items():
            np.testing.assert_array_equal(loaded.buffers[name], buffer)
        cells = random_cells(rng, 5)
        np.testing.assert_array_equal(predict(loaded, cells, 1), predict(params, cells, 1))

    def test_version_mismatch(self):
        path = os.path.join(self.temp_dir, "bad.npz")
        np.savez(path, format_version=np.array(99), config=np.array("{}"))
        with self.assertRaises(ValueError):
            load_params(path)


if __name__ == "__main__":
    unittest.main()
