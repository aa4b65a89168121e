import struct
import tempfile
from pathlib import Path
from unittest.mock import patch

import numpy as np
from django.test import SimpleTestCase

from core.exceptions import ConfigError, DegenerateInputError, FormatError, ShapeError, StateError

from .ham import (
    ACTION_CREATE,
    ACTION_JOIN,
    assign_group,
    concat_into_group,
    ham_consolidate,
    prune,
    similarity,
    update_group_alpha,
)
from .lora import (
    GROUPING_ORTHOGONALITY,
    AdapterGroup,
    GroupRegistry,
    LayerAdapter,
    TaskAdapter,
    delta_weight,
    dense_parameter_count,
    init_task_adapter,
    nonzero_parameter_count,
)
from .storage import (
    KIND_GROUP,
    KIND_TASK,
    MAGIC,
    decode_adapter,
    encode_adapter,
    load_adapter,
    save_adapter,
)


def random_adapter(rng, task_id=1, shapes=((6, 5), (4, 6)), rank=2, alpha=1.0) -> TaskAdapter:
    layers = [LayerAdapter(rng.normal(size=(d, rank)), rng.normal(size=(rank, k))) for d, k in shapes]
    return TaskAdapter(task_id=task_id, layers=layers, alpha=alpha)


def single_layer(B, A, task_id=1, alpha=1.0) -> TaskAdapter:
    return TaskAdapter(task_id=task_id, layers=[LayerAdapter(np.asarray(B, float), np.asarray(A, float))], alpha=alpha)

# ========== АДАПТЕРЫ ==========

class LoraTests(SimpleTestCase):
    """Тесты модели данных LoRA"""

    def test_delta_weight_outer_product(self):
        layer = LayerAdapter([[1.0], [2.0]], [[3.0, 4.0]])
        np.testing.assert_array_equal(delta_weight(layer), [[3, 4], [6, 8]])

    def test_zero_b_gives_zero_delta(self):
        layer = LayerAdapter(np.zeros((3, 2)), np.ones((2, 4)))
        np.testing.assert_array_equal(delta_weight(layer), np.zeros((3, 4)))

    def test_rank_mismatch(self):
        with self.assertRaises(ShapeError):
            LayerAdapter(np.ones((3, 2)), np.ones((3, 4)))

    def test_parameter_counts(self):
        """r * (d + k) до обрезки и ровно ceil(k * n) на матрицу после"""
        rng = np.random.default_rng(0)
        adapter = random_adapter(rng, shapes=((64, 64),), rank=16)
        self.assertEqual(dense_parameter_count(adapter), 2048)
        self.assertEqual(nonzero_parameter_count(adapter), 2048)
        self.assertEqual(nonzero_parameter_count(prune(adapter, 0.5)), 1024)

    def test_zero_adapter_has_no_nonzero_parameters(self):
        adapter = single_layer(np.zeros((3, 2)), np.zeros((2, 3)))
        self.assertEqual(nonzero_parameter_count(adapter), 0)
        self.assertEqual(dense_parameter_count(adapter), 12)

    def test_init_task_adapter(self):
        """B ~ N(0, 0.02^2), A = 0: начальная дельта нулевая"""
        adapter = init_task_adapter(3, [(8, 6), (8, 8)], 4, np.random.default_rng(1))
        self.assertEqual(adapter.alpha, 1.0)
        self.assertEqual(adapter.rank, 4)
        for delta in adapter.deltas():
            self.assertFalse(delta.any())
        self.assertTrue(adapter.layers[0].B.any())
        self.assertLess(np.abs(adapter.layers[0].B).max(), 0.2)

    def test_init_rejects_bad_rank(self):
        for rank in (0, 7):
            with self.assertRaises(ConfigError):
                init_task_adapter(1, [(8, 6)], rank, np.random.default_rng(1))

    def test_registry_validation(self):
        with self.assertRaises(ConfigError):
            GroupRegistry(g_max=0, tau_sim=0.3)
        with self.assertRaises(ConfigError):
            GroupRegistry(g_max=2, tau_sim=1.5)
        with self.assertRaises(ConfigError):
            GroupRegistry(g_max=2, tau_sim=0.3, grouping_rule="random")

    def test_registry_cap(self):
        registry = GroupRegistry(g_max=1, tau_sim=0.3)
        registry.new_group(base_rank=2)
        self.assertTrue(registry.is_full)
        with self.assertRaises(StateError):
            registry.new_group()
        with self.assertRaises(StateError):
            registry.get(5)

# ========== ГРУППИРОВКА ==========

class GroupingTests(SimpleTestCase):
    """Тесты сходства и выбора группы"""

    def test_self_similarity(self):
        rng = np.random.default_rng(3)
        adapter = random_adapter(rng)
        group = AdapterGroup(0, [layer.copy() for layer in adapter.layers], 1.0, 1, [1], adapter.rank)
        self.assertAlmostEqual(similarity(adapter, group), 1.0, places=12)

    def test_orthogonal_last_layer(self):
        adapter = single_layer([[1.0], [0.0]], [[1.0, 0.0]])
        group = AdapterGroup(0, [LayerAdapter([[0.0], [1.0]], [[0.0, 1.0]])], 1.0, 1, [2], 1)
        self.assertEqual(similarity(adapter, group), 0.0)

    def test_zero_delta_is_degenerate(self):
        adapter = single_layer(np.zeros((2, 1)), [[1.0, 0.0]])
        group = AdapterGroup(0, [LayerAdapter([[0.0], [1.0]], [[0.0, 1.0]])], 1.0, 1, [2], 1)
        with self.assertRaises(DegenerateInputError):
            similarity(adapter, group)

    def test_scope_all_averages_layers(self):
        """scope=all — среднее сходство по всем слоям"""
        rng = np.random.default_rng(4)
        adapter = random_adapter(rng)
        other = random_adapter(rng, task_id=2)
        group = AdapterGroup(0, [layer.copy() for layer in other.layers], 1.0, 1, [2], 2)
        per_layer = []
        for idx in range(2):
            single_a = TaskAdapter(1, [adapter.layers[idx]])
            single_g = AdapterGroup(0, [group.layers[idx]], 1.0, 1, [2], 2)
            per_layer.append(similarity(single_a, single_g))
        self.assertAlmostEqual(similarity(adapter, group, scope="all"), np.mean(per_layer), places=12)
        self.assertAlmostEqual(similarity(adapter, group, scope="last"), per_layer[-1], places=12)

    def test_similarity_matches_double_loop(self):
        """Модуль косинуса по последнему слою против поэлементного скалярного произведения"""
        rng = np.random.default_rng(7)
        for _ in range(10):
            adapter = random_adapter(rng)
            other = random_adapter(rng, task_id=2, rank=3)
            group = AdapterGroup(0, [layer.copy() for layer in other.layers], 1.0, 1, [2], 3)
            own, theirs = adapter.layers[-1], group.layers[-1]
            d, k = own.delta_shape
            dot = norm_own = norm_theirs = 0.0
            for i in range(d):
                for j in range(k):
                    a = sum(own.B[i, t] * own.A[t, j] for t in range(own.rank))
                    b = sum(theirs.B[i, t] * theirs.A[t, j] for t in range(theirs.rank))
                    dot += a * b
                    norm_own += a * a
                    norm_theirs += b * b
            expected = abs(dot) / (norm_own ** 0.5 * norm_theirs ** 0.5)
            self.assertLess(abs(similarity(adapter, group) - expected), 1e-12)

    def test_decision_invariant_under_positive_rescaling(self):
        """Масштаб дельты кандидата не меняет выбор группы и решение по порогу"""
        rng = np.random.default_rng(8)
        for g_max in (3, 4):
            for _ in range(10):
                groups = [AdapterGroup(j, random_adapter(rng, task_id=j + 2).layers, 1.0, 1, [j + 2], 2) for j in range(3)]
                registry = GroupRegistry(g_max=g_max, tau_sim=0.3, groups=groups)
                adapter = random_adapter(rng)
                baseline = assign_group(adapter, registry)
                for scale in (1e-3, 0.5, 7.0, 1e4):
                    scaled = adapter.copy()
                    scaled.layers[-1].B *= scale
                    decision = assign_group(scaled, registry)
                    self.assertEqual((decision.action, decision.group_id), (baseline.action, baseline.group_id))

    def test_empty_registry_creates(self):
        decision = assign_group(random_adapter(np.random.default_rng(5)), GroupRegistry(g_max=2, tau_sim=0.3))
        self.assertEqual(decision.action, ACTION_CREATE)

    def _registry(self, count, g_max, rule="similarity", tau=0.5):
        registry = GroupRegistry(g_max=g_max, tau_sim=tau, grouping_rule=rule)
        for _ in range(count):
            registry.new_group(base_rank=2)
        return registry

    def test_join_argmax_above_threshold(self):
        registry = self._registry(2, g_max=3)
        with patch("adapters.ham.similarity", side_effect=[0.9, 0.95]):
            decision = assign_group(random_adapter(np.random.default_rng(6)), registry)
        self.assertEqual(decision.action, ACTION_JOIN)
        self.assertEqual(decision.group_id, 1)

    def test_below_threshold_creates_when_room(self):
        registry = self._registry(2, g_max=3)
        with patch("adapters.ham.similarity", side_effect=[0.1, 0.2]):
            decision = assign_group(random_adapter(np.random.default_rng(6)), registry)
        self.assertEqual(decision.action, ACTION_CREATE)

    def test_cap_forces_join_most_similar(self):
        """При G_max групп адаптер идёт в самую похожую группу без порога"""
        registry = self._registry(2, g_max=2)
        with patch("adapters.ham.similarity", side_effect=[0.2, 0.1]):
            decision = assign_group(random_adapter(np.random.default_rng(6)), registry)
        self.assertEqual(decision.action, ACTION_JOIN)
        self.assertEqual(decision.group_id, 0)

    def test_orthogonality_rule_joins_least_similar(self):
        registry = self._registry(2, g_max=3, rule=GROUPING_ORTHOGONALITY, tau=0.3)
        with patch("adapters.ham.similarity", side_effect=[0.25, 0.05]):
            decision = assign_group(random_adapter(np.random.default_rng(6)), registry)
        self.assertEqual(decision.action, ACTION_JOIN)
        self.assertEqual(decision.group_id, 1)

        with patch("adapters.ham.similarity", side_effect=[0.8, 0.6]):
            decision = assign_group(random_adapter(np.random.default_rng(6)), registry)
        self.assertEqual(decision.action, ACTION_CREATE)

# ========== ALPHA, ОБРЕЗКА, КОНКАТЕНАЦИЯ ==========

class ConsolidationTests(SimpleTestCase):
    """Тесты обновления alpha_g, обрезки и конкатенации"""

    def test_alpha_new_group(self):
        group = AdapterGroup(0)
        self.assertEqual(update_group_alpha(group, 0.7), 0.7)
        self.assertEqual(group.member_count, 1)

    def test_alpha_mean_of_two(self):
        group = AdapterGroup(0, alpha_g=1.0, member_count=1)
        self.assertEqual(update_group_alpha(group, 0.5), 0.75)

    def test_alpha_running_mean_order_invariant(self):
        """Скользящее среднее равно арифметическому в любом порядке вставки"""
        rng = np.random.default_rng(7)
        for values in ([0.2, 0.4, 0.9], [0.9, 0.2, 0.4]):
            group = AdapterGroup(0)
            for v in values:
                update_group_alpha(group, v)
            self.assertAlmostEqual(group.alpha_g, 0.5, delta=1e-12)
        for _ in range(100):
            values = rng.uniform(-2.0, 2.0, size=rng.integers(1, 51))
            group = AdapterGroup(0)
            for v in rng.permutation(values):
                update_group_alpha(group, v)
            self.assertLess(abs(group.alpha_g - values.mean()), 1e-12)
            self.assertEqual(group.member_count, values.size)

    def test_prune_example(self):
        adapter = single_layer([[1.0, -5.0], [2.0, 0.1]], np.ones((2, 2)))
        pruned = prune(adapter, 0.5)
        np.testing.assert_array_equal(pruned.layers[0].B, [[0.0, -5.0], [2.0, 0.0]])

    def test_prune_full_keep_is_noop(self):
        adapter = random_adapter(np.random.default_rng(8))
        pruned = prune(adapter, 1.0)
        for own, new in zip(adapter.layers, pruned.layers):
            np.testing.assert_array_equal(own.B, new.B)
            np.testing.assert_array_equal(own.A, new.A)

    def test_prune_does_not_mutate_input(self):
        adapter = random_adapter(np.random.default_rng(9))
        before = adapter.layers[0].B.copy()
        prune(adapter, 0.3)
        np.testing.assert_array_equal(adapter.layers[0].B, before)

    def test_prune_counts_per_matrix(self):
        adapter = random_adapter(np.random.default_rng(10), shapes=((9, 7),), rank=3)
        pruned = prune(adapter, 0.6)
        self.assertEqual(np.count_nonzero(pruned.layers[0].B), 17)  # ceil(0.6 * 27)
        self.assertEqual(np.count_nonzero(pruned.layers[0].A), 13)  # ceil(0.6 * 21)

    def test_prune_rejects_bad_fraction(self):
        with self.assertRaises(ConfigError):
            prune(random_adapter(np.random.default_rng(11)), 0.0)

    def test_concat_identity(self):
        """B_G @ A_G равно сумме дельт участников"""
        rng = np.random.default_rng(12)
        for _ in range(100):
            members = [random_adapter(rng, task_id=i) for i in range(int(rng.integers(1, 5)))]
            group = AdapterGroup(0)
            for member in members:
                concat_into_group(group, member)
            for idx, delta in enumerate(group.deltas()):
                expected = sum(m.deltas()[idx] for m in members)
                self.assertLess(np.abs(delta - expected).max(), 1e-9)

    def test_concat_into_empty_group(self):
        adapter = random_adapter(np.random.default_rng(13))
        group = concat_into_group(AdapterGroup(0), adapter)
        for own, new in zip(group.layers, adapter.layers):
            np.testing.assert_array_equal(own.B, new.B)
            np.testing.assert_array_equal(own.A, new.A)
        self.assertEqual(group.member_task_ids, [1])

    def test_concat_rank_grows(self):
        rng = np.random.default_rng(14)
        group = AdapterGroup(0)
        for i in range(3):
            concat_into_group(group, random_adapter(rng, task_id=i, rank=4))
        self.assertEqual(group.rank, 12)
        self.assertEqual(group.member_count, 3)

    def test_concat_shape_mismatch(self):
        rng = np.random.default_rng(15)
        group = concat_into_group(AdapterGroup(0), random_adapter(rng))
        with self.assertRaises(ShapeError):
            concat_into_group(group, random_adapter(rng, shapes=((6, 4), (4, 6))))
        with self.assertRaises(ShapeError):
            concat_into_group(group, random_adapter(rng, rank=3))

    def test_first_task_forms_group(self):
        adapter = random_adapter(np.random.default_rng(16), alpha=0.8)
        registry = GroupRegistry(g_max=2, tau_sim=0.3)
        result = ham_consolidate(adapter, registry, 0.6)
        self.assertEqual(len(registry), 1)
        group = registry.groups[0]
        self.assertEqual(group.alpha_g, 0.8)
        for own, new in zip(group.layers, result.pruned.layers):
            np.testing.assert_array_equal(own.B, new.B)

    def test_single_group_cap(self):
        rng = np.random.default_rng(17)
        registry = GroupRegistry(g_max=1, tau_sim=0.9)
        for i in range(5):
            ham_consolidate(random_adapter(rng, task_id=i + 1, rank=2), registry, 0.6)
        self.assertEqual(len(registry), 1)
        self.assertEqual(registry.groups[0].rank, 10)
        self.assertEqual(registry.merged_rank(), 10)

    def test_registry_invariants_over_stream(self):
        """Число групп не превышает G_max, сумма участников равна числу задач"""
        rng = np.random.default_rng(18)
        for g_max in (1, 2, 4):
            registry = GroupRegistry(g_max=g_max, tau_sim=0.0)
            for i in range(4):
                ham_consolidate(random_adapter(rng, task_id=i + 1), registry, 0.6)
            self.assertLessEqual(len(registry), g_max)
            self.assertEqual(sum(g.member_count for g in registry.groups), 4)
            self.assertEqual(sorted(t for g in registry.groups for t in g.member_task_ids), [1, 2, 3, 4])
            for group in registry.groups:
                self.assertEqual(group.rank, group.member_count * 2)

# ========== ФОРМАТ ФАЙЛА ==========

class StorageTests(SimpleTestCase):
    """Тесты формата HAMA"""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.root = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_task_round_trip(self):
        adapter = random_adapter(np.random.default_rng(20), task_id=4, alpha=0.37)
        path = save_adapter(self.root / "task.hama", adapter)
        loaded = load_adapter(path)
        self.assertIsInstance(loaded, TaskAdapter)
        self.assertEqual(loaded.task_id, 4)
        self.assertEqual(loaded.alpha, 0.37)
        for own, new in zip(adapter.layers, loaded.layers):
            self.assertEqual(own.B.shape, new.B.shape)
            self.assertEqual(own.A.shape, new.A.shape)
            np.testing.assert_array_equal(new.B, own.B.astype(np.float32).astype(np.float64))
            np.testing.assert_array_equal(new.A, own.A.astype(np.float32).astype(np.float64))

    def test_group_round_trip_keeps_member_count(self):
        rng = np.random.default_rng(21)
        group = AdapterGroup(0)
        for i in range(3):
            concat_into_group(group, random_adapter(rng, task_id=i + 1, rank=2))
        loaded = load_adapter(save_adapter(self.root / "group.hama", group))
        self.assertIsInstance(loaded, AdapterGroup)
        self.assertEqual(loaded.rank, 6)
        self.assertEqual(loaded.member_count, 3)
        self.assertEqual(loaded.member_task_ids, [1, 2, 3])
        self.assertEqual(loaded.base_rank, 2)

    def test_header_layout(self):
        payload = encode_adapter(single_layer([[1.0], [2.0]], [[3.0, 4.0, 5.0]], alpha=0.5))
        magic, version, kind, alpha, layers = struct.unpack_from("<4sIIdI", payload)
        self.assertEqual((magic, version, kind, alpha, layers), (MAGIC, 1, 0, 0.5, 1))
        self.assertEqual(struct.unpack_from("<III", payload, 24), (2, 3, 1))
        self.assertEqual(np.frombuffer(payload, dtype="<f4", count=2, offset=36).tolist(), [1.0, 2.0])
        self.assertEqual(decode_adapter(payload).kind, KIND_TASK)

    def test_wrong_magic(self):
        payload = bytearray(encode_adapter(random_adapter(np.random.default_rng(22))))
        payload[:4] = b"NOPE"
        path = self.root / "bad.hama"
        path.write_bytes(bytes(payload))
        with self.assertRaises(FormatError):
            load_adapter(path)

    def test_wrong_version(self):
        payload = bytearray(encode_adapter(random_adapter(np.random.default_rng(23))))
        payload[4:8] = struct.pack("<I", 99)
        with self.assertRaises(FormatError):
            decode_adapter(bytes(payload))

    def test_truncated_file(self):
        payload = encode_adapter(random_adapter(np.random.default_rng(24)))
        for cut in (3, 20, len(payload) // 2, len(payload) - 1):
            with self.assertRaises(FormatError):
                decode_adapter(payload[:cut])

    def test_trailing_bytes(self):
        payload = encode_adapter(random_adapter(np.random.default_rng(25)))
        with self.assertRaises(FormatError):
            decode_adapter(payload + b"\x00")

    def test_missing_file(self):
        with self.assertRaises(FormatError):
            load_adapter(self.root / "absent.hama")

    def test_encoding_is_deterministic(self):
        rng = np.random.default_rng(26)
        group = AdapterGroup(0)
        concat_into_group(group, random_adapter(rng))
        self.assertEqual(encode_adapter(group), encode_adapter(group.copy()))
        self.assertEqual(decode_adapter(encode_adapter(group)).kind, KIND_GROUP)
