import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from adapters.lora import AdapterGroup, GroupRegistry, LayerAdapter
from adapters.storage import KIND_MERGED, load_adapter, save_adapter
from core.exceptions import ConfigError, ShapeError, StateError
from core.rng import make_rng
from training.backbone import ForwardContext, FrozenBackbone

from .merge_service import (
    MERGE_DARE_TIES,
    MERGE_LINEAR,
    MERGE_TIES,
    MergedDelta,
    dare_rescale,
    finalize,
    merge_dare_ties,
    merge_ham,
    merge_layerwise,
    merge_linear,
    merge_ties,
    zero_delta,
)


def random_group(rng, group_id, shapes, rank, alpha=None) -> AdapterGroup:
    layers = [LayerAdapter(rng.normal(size=(d, rank)), rng.normal(size=(rank, k))) for d, k in shapes]
    alpha = float(rng.uniform(0.2, 1.5)) if alpha is None else alpha
    return AdapterGroup(group_id, layers, alpha, 1, [group_id + 1], rank)


def registry_of(groups) -> GroupRegistry:
    return GroupRegistry(g_max=max(1, len(groups)), tau_sim=0.3, groups=list(groups))

# ========== ИТОГОВОЕ СЛИЯНИЕ ==========

class MergeHamTests(SimpleTestCase):
    """Тесты слияния групповых адаптеров"""

    SHAPES = ((5, 4), (5, 5))

    def test_single_group_reduction(self):
        group = random_group(np.random.default_rng(0), 0, self.SHAPES, 3, alpha=0.6)
        merged = merge_ham(registry_of([group]))
        for delta, expected in zip(merged.deltas, group.deltas()):
            self.assertLess(np.abs(delta - 0.6 * expected).max(), 1e-9)

    def test_equal_groups_average_to_same_delta(self):
        group = random_group(np.random.default_rng(1), 0, self.SHAPES, 2, alpha=1.0)
        twin = group.copy()
        twin.group_id = 1
        merged = merge_ham(registry_of([group, twin]))
        for delta, expected in zip(merged.deltas, group.deltas()):
            self.assertLess(np.abs(delta - expected).max(), 1e-12)

    def test_matches_naive_accumulation(self):
        """Совпадает с наивным накоплением и делением на M"""
        rng = np.random.default_rng(2)
        for _ in range(20):
            groups = [random_group(rng, j, self.SHAPES, int(rng.integers(1, 4))) for j in range(3)]
            merged = merge_ham(registry_of(groups))
            for idx, (d, k) in enumerate(self.SHAPES):
                expected = np.zeros((d, k))
                for group in groups:
                    layer = group.layers[idx]
                    for i in range(d):
                        for j in range(k):
                            expected[i, j] += group.alpha_g * sum(layer.B[i, t] * layer.A[t, j] for t in range(layer.rank))
                expected /= len(groups)
                self.assertLess(np.abs(merged.deltas[idx] - expected).max(), 1e-9)

    def test_constant_alpha_equals_scaled_linear(self):
        """Все alpha_g = c: merge_ham равен c * merge_linear с равными весами"""
        rng = np.random.default_rng(5)
        for c in (0.3, 1.0, 2.2):
            groups = [random_group(rng, j, self.SHAPES, 2 + j, alpha=c) for j in range(3)]
            merged = merge_ham(registry_of(groups))
            for idx in range(len(self.SHAPES)):
                expected = c * merge_linear([group.deltas()[idx] for group in groups], [1.0] * 3)
                self.assertLess(np.abs(merged.deltas[idx] - expected).max(), 1e-9)

    def test_factors_reproduce_deltas(self):
        rng = np.random.default_rng(3)
        groups = [random_group(rng, j, self.SHAPES, 2 + j) for j in range(3)]
        merged = merge_ham(registry_of(groups))
        self.assertEqual(merged.rank, 2 + 3 + 4)
        for factor, delta in zip(merged.factors, merged.deltas):
            self.assertLess(np.abs(factor.B @ factor.A - delta).max(), 1e-12)

    def test_registry_not_mutated(self):
        rng = np.random.default_rng(4)
        groups = [random_group(rng, j, self.SHAPES, 2) for j in range(2)]
        before = [g.copy() for g in groups]
        merge_ham(registry_of(groups))
        for old, new in zip(before, groups):
            self.assertEqual(old.alpha_g, new.alpha_g)
            np.testing.assert_array_equal(old.layers[0].B, new.layers[0].B)

    def test_empty_registry(self):
        with self.assertRaises(StateError):
            merge_ham(GroupRegistry(g_max=2, tau_sim=0.3))

# ========== БАЗОВЫЕ АЛГОРИТМЫ ==========

class BaselineMergeTests(SimpleTestCase):
    """Тесты linear / TIES / DARE"""

    def test_linear_single_delta(self):
        delta = np.array([[1.0, -2.0], [0.5, 3.0]])
        np.testing.assert_array_equal(merge_linear([delta], [1.0]), delta)

    def test_linear_equal_weights_is_mean(self):
        rng = np.random.default_rng(5)
        deltas = [rng.normal(size=(3, 4)) for _ in range(4)]
        expected = np.zeros((3, 4))
        for delta in deltas:
            expected += delta
        expected /= 4
        np.testing.assert_allclose(merge_linear(deltas, [2.0] * 4), expected, atol=1e-12)
        np.testing.assert_allclose(merge_linear(deltas), expected, atol=1e-12)

    def test_linear_zero_deltas(self):
        self.assertFalse(merge_linear([np.zeros((2, 2)), np.zeros((2, 2))]).any())

    def test_linear_errors(self):
        with self.assertRaises(ConfigError):
            merge_linear([np.ones((2, 2)), np.ones((2, 2))], [1.0, -1.0])
        with self.assertRaises(ShapeError):
            merge_linear([np.ones((2, 2)), np.ones((2, 3))])
        with self.assertRaises(ConfigError):
            merge_linear([])

    def test_ties_single_delta(self):
        delta = np.array([[1.0, -2.0], [0.5, 3.0]])
        np.testing.assert_array_equal(merge_ties([delta], trim_fraction=1.0, lam=1.0), delta)

    def test_ties_sign_election(self):
        """+2 и -1 в одной позиции: выбран знак +, результат +2"""
        merged = merge_ties([np.array([[2.0]]), np.array([[-1.0]])], trim_fraction=1.0)
        self.assertEqual(merged[0, 0], 2.0)

    def test_ties_disjoint_mean_and_lambda(self):
        a = np.array([[4.0, 0.0, -1.0]])
        b = np.array([[2.0, 0.0, 3.0]])
        merged = merge_ties([a, b], trim_fraction=1.0, lam=0.5)
        np.testing.assert_array_equal(merged, [[1.5, 0.0, 1.5]])

    def test_ties_trims_small_entries(self):
        a = np.array([[10.0, 0.1, 0.2, 0.3, 0.4]])
        merged = merge_ties([a], trim_fraction=0.2)
        np.testing.assert_array_equal(merged, [[10.0, 0.0, 0.0, 0.0, 0.0]])

    def test_ties_zero_positions_stay_zero(self):
        rng = np.random.default_rng(6)
        deltas = [rng.normal(size=(4, 4)) for _ in range(3)]
        for delta in deltas:
            delta[1, :] = 0.0
        merged = merge_ties(deltas, trim_fraction=0.5)
        self.assertFalse(merged[1].any())

    def test_dare_zero_drop_equals_ties(self):
        rng = np.random.default_rng(7)
        deltas = [rng.normal(size=(3, 3)) for _ in range(3)]
        np.testing.assert_array_equal(merge_dare_ties(deltas, drop_prob=0.0, seed=1), merge_ties(deltas))

    def test_dare_deterministic(self):
        rng = np.random.default_rng(8)
        deltas = [rng.normal(size=(3, 3)) for _ in range(3)]
        np.testing.assert_array_equal(merge_dare_ties(deltas, seed=4), merge_dare_ties(deltas, seed=4))

    def test_dare_rejects_full_drop(self):
        with self.assertRaises(ConfigError):
            merge_dare_ties([np.ones((2, 2))], drop_prob=1.0)

    def test_dare_rescale_unbiased(self):
        """Среднее по 10 000 seed отличается от исходной дельты не более чем на 2%"""
        delta = np.array([[1.0, -2.0], [0.5, 3.0]])
        total = np.zeros_like(delta)
        for seed in range(10_000):
            total += dare_rescale(delta, 0.1, make_rng(seed, "dare-check"))
        mean = total / 10_000
        self.assertTrue(np.all(np.abs(mean - delta) <= 0.02 * np.abs(delta)))

    def test_ties_and_dare_leave_inputs_untouched(self):
        rng = np.random.default_rng(10)
        deltas = [rng.normal(size=(4, 3)) for _ in range(3)]
        before = [delta.copy() for delta in deltas]
        merge_ties(deltas, trim_fraction=0.4, lam=0.7)
        merge_dare_ties(deltas, drop_prob=0.5, seed=2)
        merge_layerwise([[delta] for delta in deltas], MERGE_DARE_TIES, seed=2)
        for old, new in zip(before, deltas):
            np.testing.assert_array_equal(old, new)

    def test_layerwise_unknown_algorithm(self):
        with self.assertRaises(ConfigError):
            merge_layerwise([[np.ones((2, 2))]], "ham")

    def test_layerwise_applies_per_layer(self):
        rng = np.random.default_rng(9)
        sources = [[rng.normal(size=(3, 2)), rng.normal(size=(3, 3))] for _ in range(2)]
        for algorithm in (MERGE_LINEAR, MERGE_TIES, MERGE_DARE_TIES):
            merged = merge_layerwise(sources, algorithm, seed=3)
            self.assertEqual(merged.algorithm, algorithm)
            self.assertEqual([d.shape for d in merged.deltas], [(3, 2), (3, 3)])
            self.assertIsNone(merged.rank)
        linear = merge_layerwise(sources, MERGE_LINEAR)
        np.testing.assert_allclose(linear.deltas[1], (sources[0][1] + sources[1][1]) / 2, atol=1e-12)

# ========== ИТОГОВАЯ МОДЕЛЬ ==========

class FinalModelTests(SimpleTestCase):
    """Тесты W0 + dW_merged"""

    def setUp(self):
        self.backbone = FrozenBackbone.build(input_dim=4, hidden_dim=5, seed=1)
        self.backbone.ensure_classes(3)
        self.x = np.random.default_rng(10).normal(size=(6, 4))

    def test_zero_delta_is_frozen_backbone(self):
        model = finalize(self.backbone, zero_delta(self.backbone))
        np.testing.assert_array_equal(model.logits(self.x), self.backbone.forward_plain(self.x))
        self.assertEqual(model.num_classes, 3)

    def test_single_group_cross_path(self):
        """forward_final с M = 1 совпадает с forward_train с одной группой"""
        rng = np.random.default_rng(11)
        for _ in range(10):
            group = random_group(rng, 0, self.backbone.layer_shapes, 3)
            model = finalize(self.backbone, merge_ham(registry_of([group])))
            expected, _ = self.backbone.forward_train(self.x, ForwardContext(groups=[group]))
            self.assertLess(np.abs(model.logits(self.x) - expected).max(), 1e-9)
            np.testing.assert_array_equal(model.predict(self.x), np.argmax(expected, axis=1))

    def test_three_groups_match_materialized_weights(self):
        """M = 3: проход итоговой модели против явного W0 + (1/3) sum alpha_g B_g A_g"""
        rng = np.random.default_rng(13)
        for _ in range(5):
            groups = [random_group(rng, j, self.backbone.layer_shapes, j + 1) for j in range(3)]
            for group in groups:
                for layer in group.layers:
                    layer.B *= 0.3
            model = finalize(self.backbone, merge_ham(registry_of(groups)))

            h = self.x
            for idx, (w, b) in enumerate(zip(self.backbone.weights, self.backbone.biases)):
                weight = w.copy()
                for group in groups:
                    layer = group.layers[idx]
                    for i in range(weight.shape[0]):
                        for j in range(weight.shape[1]):
                            weight[i, j] += group.alpha_g * sum(layer.B[i, t] * layer.A[t, j] for t in range(layer.rank)) / 3
                h = np.maximum(h @ weight.T + b, 0.0)
            expected = h @ self.backbone.head_weight.T + self.backbone.head_bias
            self.assertLess(np.abs(model.logits(self.x) - expected).max(), 1e-9)

    def test_final_model_is_a_snapshot(self):
        """Обучение следующих задач не меняет уже построенную итоговую модель"""
        rng = np.random.default_rng(14)
        merged = merge_ham(registry_of([random_group(rng, 0, self.backbone.layer_shapes, 2)]))
        model = finalize(self.backbone, merged)
        before = model.logits(self.x).copy()

        self.backbone.head_weight[:] += 1.0
        self.backbone.head_bias[:] -= 2.0
        self.backbone.ensure_classes(5)
        merged.deltas[0][:] = 0.0

        self.assertEqual(model.num_classes, 3)
        np.testing.assert_array_equal(model.logits(self.x), before)

    def test_finalize_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            finalize(self.backbone, MergedDelta(deltas=[np.zeros((5, 4))]))
        with self.assertRaises(ShapeError):
            finalize(self.backbone, MergedDelta(deltas=[np.zeros((5, 4)), np.zeros((4, 5))]))

    def test_merged_file_keeps_factored_rank(self):
        rng = np.random.default_rng(12)
        groups = [random_group(rng, j, self.backbone.layer_shapes, 2) for j in range(2)]
        merged = merge_ham(registry_of(groups))
        with tempfile.TemporaryDirectory() as tmp:
            record = load_adapter(save_adapter(Path(tmp) / "merged.hama", merged))
        self.assertEqual(record.kind, KIND_MERGED)
        self.assertEqual(record.layers[0].rank, 4)
        restored = MergedDelta.from_record(record)
        for own, new in zip(merged.deltas, restored.deltas):
            np.testing.assert_allclose(new, own, atol=1e-5)

    def test_dense_merged_file(self):
        merged = merge_layerwise(
            [[np.ones(shape) for shape in self.backbone.layer_shapes]] * 2, MERGE_LINEAR
        )
        with tempfile.TemporaryDirectory() as tmp:
            record = load_adapter(save_adapter(Path(tmp) / "linear.hama", merged))
        restored = MergedDelta.from_record(record)
        self.assertEqual(restored.algorithm, MERGE_LINEAR)
        self.assertIsNone(restored.factors)
        for own, new in zip(merged.deltas, restored.deltas):
            np.testing.assert_array_equal(new, own)
