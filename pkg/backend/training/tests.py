import math
from dataclasses import dataclass

import numpy as np
from django.test import SimpleTestCase

from adapters.lora import AdapterGroup, GroupRegistry, LayerAdapter, TaskAdapter, init_task_adapter
from core.exceptions import ConfigError, InputError, ShapeError, TrainingError
from core.rng import make_rng

from .backbone import ForwardContext, FrozenBackbone
from .optim import OptimizerState, adamw_step
from .trainer import loss_and_gradients, train_task


@dataclass
class Settings:
    rank: int = 2
    lr: float = 1e-2
    batch_size: int = 64
    epochs: int = 20
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    train_group_alphas: bool = True
    head_init: str = "prototype"


@dataclass
class Task:
    task_id: int
    class_ids: tuple
    x_train: np.ndarray
    y_train: np.ndarray


def random_layers(rng, shapes, rank):
    return [LayerAdapter(rng.normal(size=(d, rank)), rng.normal(size=(rank, k))) for d, k in shapes]


def gaussian_task(rng, task_id, class_ids, dim, per_class, scale):
    means = {c: scale * rng.normal(size=dim) / math.sqrt(dim) for c in class_ids}
    x = np.vstack([means[c] + rng.normal(size=(per_class, dim)) for c in class_ids])
    y = np.concatenate([np.full(per_class, c) for c in class_ids])
    return Task(task_id, tuple(class_ids), x, y)

# ========== ПРЯМОЙ ПРОХОД ==========

class BackboneTests(SimpleTestCase):
    """Тесты замороженной сети"""

    def setUp(self):
        self.backbone = FrozenBackbone.build(input_dim=6, hidden_dim=5, seed=3)
        self.backbone.ensure_classes(3)
        self.x = np.random.default_rng(0).normal(size=(7, 6))

    def test_zero_adapter_equals_plain(self):
        """Нулевой текущий адаптер без групп не меняет выход"""
        adapter = init_task_adapter(1, self.backbone.layer_shapes, 2, np.random.default_rng(1))
        logits, _ = self.backbone.forward_train(self.x, ForwardContext(current=adapter))
        np.testing.assert_array_equal(logits, self.backbone.forward_plain(self.x))

    def test_group_with_zero_alpha_equals_plain(self):
        rng = np.random.default_rng(2)
        group = AdapterGroup(0, random_layers(rng, self.backbone.layer_shapes, 2), 0.0, 1, [1], 2)
        logits, _ = self.backbone.forward_train(self.x, ForwardContext(groups=[group]))
        np.testing.assert_allclose(logits, self.backbone.forward_plain(self.x), atol=1e-12)

    def test_forward_train_matches_materialized_weights(self):
        """Факторизованный проход совпадает с проходом по W0 + sum alpha * dW"""
        rng = np.random.default_rng(3)
        shapes = self.backbone.layer_shapes
        for _ in range(10):
            groups = [AdapterGroup(j, random_layers(rng, shapes, 2 * (j + 1)), rng.normal(), j + 1) for j in range(2)]
            current = TaskAdapter(1, random_layers(rng, shapes, 2), rng.normal())
            logits, _ = self.backbone.forward_train(self.x, ForwardContext(groups=groups, current=current))

            deltas = []
            for idx in range(len(shapes)):
                delta = current.alpha * current.deltas()[idx]
                for group in groups:
                    delta = delta + group.alpha_g * group.deltas()[idx]
                deltas.append(delta)
            h = self.x
            for w, b, delta in zip(self.backbone.weights, self.backbone.biases, deltas):
                h = np.maximum(h @ (w + delta).T + b, 0.0)
            expected = h @ self.backbone.head_weight.T + self.backbone.head_bias
            self.assertLess(np.abs(logits - expected).max(), 1e-9)

    def test_pre_activation_linear_in_current_alpha(self):
        """При фиксированном входе слоя предактивация аффинна по alpha текущего адаптера"""
        rng = np.random.default_rng(5)
        shapes = self.backbone.layer_shapes
        group = AdapterGroup(0, random_layers(rng, shapes, 2), 0.8, 1)
        current = TaskAdapter(1, random_layers(rng, shapes, 2))
        pre = {}
        for alpha in (0.0, 1.0, 2.5, -0.7):
            current.alpha = alpha
            _, cache = self.backbone.forward_train(self.x, ForwardContext(groups=[group], current=current))
            pre[alpha] = cache.layers[0].pre
            for idx, layer_cache in enumerate(cache.layers):
                base = layer_cache.inputs @ self.backbone.weights[idx].T + self.backbone.biases[idx]
                base = base + group.alpha_g * layer_cache.group_out[0]
                direct = layer_cache.inputs @ current.deltas()[idx].T
                np.testing.assert_allclose(layer_cache.pre, base + alpha * direct, atol=1e-10)
        slope = pre[1.0] - pre[0.0]
        for alpha in (2.5, -0.7):
            np.testing.assert_allclose(pre[alpha], pre[0.0] + alpha * slope, atol=1e-10)

    def test_imprint_rows(self):
        backbone = FrozenBackbone.build(input_dim=4, hidden_dim=3, seed=6)
        backbone.ensure_classes(3)
        untouched = backbone.head_weight[0].copy()
        prototypes = np.array([[1.0, 2.0, 0.0], [0.0, 0.5, 3.0]])
        backbone.imprint_rows([1, 2], prototypes)
        np.testing.assert_array_equal(backbone.head_weight[1:], prototypes)
        np.testing.assert_array_equal(backbone.head_bias[1:], [-2.5, -4.625])
        np.testing.assert_array_equal(backbone.head_weight[0], untouched)
        with self.assertRaises(ShapeError):
            backbone.imprint_rows([3], prototypes[:1])
        with self.assertRaises(ShapeError):
            backbone.imprint_rows([1], prototypes)

    def test_snapshot_keeps_head(self):
        snapshot = self.backbone.snapshot()
        self.backbone.head_weight[0] += 1.0
        self.backbone.ensure_classes(5)
        self.assertEqual(snapshot.num_classes_seen, 3)
        self.assertEqual(snapshot.checksum(), self.backbone.checksum())
        self.assertFalse(np.array_equal(snapshot.head_weight[0], self.backbone.head_weight[0]))

    def test_single_input(self):
        logits, _ = self.backbone.forward_train(self.x[0], ForwardContext())
        self.assertEqual(logits.shape, (3,))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            self.backbone.forward_train(np.ones((2, 4)), ForwardContext())
        bad = TaskAdapter(1, random_layers(np.random.default_rng(4), [(5, 6)], 2))
        with self.assertRaises(ShapeError):
            self.backbone.forward_train(self.x, ForwardContext(current=bad))
        with self.assertRaises(ShapeError):
            self.backbone.forward_final(self.x, [np.zeros((5, 6)), np.zeros((4, 5))])

    def test_forward_final_zero_delta(self):
        zeros = [np.zeros(shape) for shape in self.backbone.layer_shapes]
        np.testing.assert_array_equal(self.backbone.forward_final(self.x, zeros), self.backbone.forward_plain(self.x))

    def test_expand_head(self):
        """Голова растёт аддитивно, старые строки не меняются"""
        backbone = FrozenBackbone.build(input_dim=4, hidden_dim=3, seed=5)
        self.assertEqual(backbone.num_classes_seen, 0)
        backbone.expand_head(2)
        first = backbone.head_weight.copy()
        backbone.expand_head(2)
        self.assertEqual(backbone.forward_plain(np.ones(4)).shape, (4,))
        np.testing.assert_array_equal(backbone.head_weight[:2], first)
        self.assertEqual(backbone.ensure_classes(3), 0)
        with self.assertRaises(ConfigError):
            backbone.expand_head(0)

    def test_build_is_deterministic(self):
        a = FrozenBackbone.build(input_dim=4, hidden_dim=3, seed=9)
        b = FrozenBackbone.build(input_dim=4, hidden_dim=3, seed=9)
        self.assertEqual(a.checksum(), b.checksum())
        self.assertNotEqual(a.checksum(), FrozenBackbone.build(input_dim=4, hidden_dim=3, seed=10).checksum())

    def test_frozen_weights_are_read_only(self):
        with self.assertRaises(ValueError):
            self.backbone.weights[0][0, 0] = 1.0

# ========== ФУНКЦИЯ ПОТЕРЬ И ГРАДИЕНТЫ ==========

class GradientTests(SimpleTestCase):
    """Сверка аналитических градиентов с центральными разностями"""

    STEP = 1e-5

    def _instance(self, seed):
        rng = np.random.default_rng(seed)
        backbone = FrozenBackbone.build(input_dim=8, hidden_dim=8, seed=seed)
        backbone.ensure_classes(4)
        shapes = backbone.layer_shapes
        groups = [AdapterGroup(j, random_layers(rng, shapes, 2) if j == 0 else random_layers(rng, shapes, 4),
                               float(rng.uniform(0.5, 1.5)), 1 + j) for j in range(2)]
        for group in groups:
            for layer in group.layers:
                layer.B *= 0.3
        current = TaskAdapter(1, random_layers(rng, shapes, 2), float(rng.uniform(0.5, 1.5)))
        for layer in current.layers:
            layer.B *= 0.3
        x = rng.normal(size=(5, 8))
        y = rng.choice([2, 3], size=5)
        return backbone, ForwardContext(groups=groups, current=current), (x, y)

    def _loss(self, backbone, ctx, batch):
        return loss_and_gradients(batch, ctx, backbone, active_classes=[2, 3])[0]

    def _numeric(self, backbone, ctx, batch, array, index):
        old = array[index]
        array[index] = old + self.STEP
        plus = self._loss(backbone, ctx, batch)
        array[index] = old - self.STEP
        minus = self._loss(backbone, ctx, batch)
        array[index] = old
        return (plus - minus) / (2 * self.STEP)

    def _numeric_attr(self, backbone, ctx, batch, obj, attr):
        old = getattr(obj, attr)
        setattr(obj, attr, old + self.STEP)
        plus = self._loss(backbone, ctx, batch)
        setattr(obj, attr, old - self.STEP)
        minus = self._loss(backbone, ctx, batch)
        setattr(obj, attr, old)
        return (plus - minus) / (2 * self.STEP)

    def assertClose(self, analytic, numeric, what):
        tol = 1e-4 * max(abs(analytic), abs(numeric)) + 1e-7
        self.assertLessEqual(abs(analytic - numeric), tol, f"{what}: {analytic} vs {numeric}")

    def test_gradients_match_finite_differences(self):
        for seed in range(5):
            backbone, ctx, batch = self._instance(seed)
            _, grads = loss_and_gradients(batch, ctx, backbone, active_classes=[2, 3])

            for idx, layer in enumerate(ctx.current.layers):
                dB, dA = grads.layers[idx]
                for index in np.ndindex(layer.B.shape):
                    self.assertClose(dB[index], self._numeric(backbone, ctx, batch, layer.B, index), f"B.{idx}{index}")
                for index in np.ndindex(layer.A.shape):
                    self.assertClose(dA[index], self._numeric(backbone, ctx, batch, layer.A, index), f"A.{idx}{index}")

            self.assertClose(grads.alpha, self._numeric_attr(backbone, ctx, batch, ctx.current, "alpha"), "alpha")
            for j, group in enumerate(ctx.groups):
                self.assertClose(
                    grads.group_alphas[j], self._numeric_attr(backbone, ctx, batch, group, "alpha_g"), f"alpha_g.{j}"
                )
            for index in np.ndindex(backbone.head_weight.shape):
                self.assertClose(
                    grads.head_weight[index],
                    self._numeric(backbone, ctx, batch, backbone.head_weight, index),
                    f"head.weight{index}",
                )
            for index in np.ndindex(backbone.head_bias.shape):
                self.assertClose(
                    grads.head_bias[index],
                    self._numeric(backbone, ctx, batch, backbone.head_bias, index),
                    f"head.bias{index}",
                )

    def test_masked_head_rows_get_no_gradient(self):
        backbone, ctx, batch = self._instance(11)
        _, grads = loss_and_gradients(batch, ctx, backbone, active_classes=[2, 3])
        self.assertFalse(grads.head_weight[:2].any())
        self.assertFalse(grads.head_bias[:2].any())

    def test_uniform_logits_give_log_c(self):
        backbone = FrozenBackbone.build(input_dim=4, hidden_dim=4, seed=0)
        backbone.ensure_classes(5)
        backbone.head_weight[:] = 0.0
        loss, _ = loss_and_gradients((np.ones((3, 4)), np.array([0, 2, 4])), ForwardContext(), backbone)
        self.assertAlmostEqual(loss, math.log(5), places=12)

    def test_zero_b_kills_a_gradient(self):
        """B = 0: градиент A строго нулевой, градиент B — нет"""
        backbone, ctx, batch = self._instance(12)
        for layer in ctx.current.layers:
            layer.B[:] = 0.0
        _, grads = loss_and_gradients(batch, ctx, backbone, active_classes=[2, 3])
        for dB, dA in grads.layers:
            self.assertFalse(dA.any())
        self.assertTrue(any(dB.any() for dB, _ in grads.layers))

    def test_frozen_alphas_have_no_gradient(self):
        backbone, ctx, batch = self._instance(13)
        ctx.current_alpha_trainable = False
        ctx.group_alphas_trainable = False
        _, grads = loss_and_gradients(batch, ctx, backbone, active_classes=[2, 3])
        self.assertIsNone(grads.alpha)
        self.assertEqual(grads.group_alphas, [])

    def test_batch_errors(self):
        backbone, ctx, _ = self._instance(14)
        with self.assertRaises(InputError):
            loss_and_gradients((np.zeros((0, 8)), np.zeros(0, dtype=int)), ctx, backbone, [2, 3])
        with self.assertRaises(InputError):
            loss_and_gradients((np.zeros((1, 8)), np.array([0])), ctx, backbone, [2, 3])
        with self.assertRaises(InputError):
            loss_and_gradients((np.zeros((1, 8)), np.array([9])), ctx, backbone, [2, 3])
        with self.assertRaises(ShapeError):
            loss_and_gradients((np.zeros((2, 8)), np.array([2])), ctx, backbone, [2, 3])

# ========== ОПТИМИЗАТОР ==========

class AdamWTests(SimpleTestCase):
    """Тесты AdamW"""

    def test_zero_gradient_no_decay(self):
        params = {"w": np.array([[1.0, -2.0]]), "b": np.array([0.5])}
        state = OptimizerState(lr=0.1)
        for _ in range(3):
            adamw_step(state, params, {"w": np.zeros((1, 2)), "b": np.zeros(1)})
        np.testing.assert_array_equal(params["w"], [[1.0, -2.0]])
        np.testing.assert_array_equal(params["b"], [0.5])

    def test_two_steps_closed_form(self):
        """Два шага на скаляре против ручного расчёта моментов"""
        lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
        p = np.array([1.0])
        state = OptimizerState(lr=lr, beta1=b1, beta2=b2, eps=eps)
        adamw_step(state, {"p": p}, {"p": np.array([0.5])})
        adamw_step(state, {"p": p}, {"p": np.array([-0.3])})

        m1, v1 = (1 - b1) * 0.5, (1 - b2) * (0.5 * 0.5)
        expected = 1.0 - lr * (m1 / (1 - b1)) / (math.sqrt(v1 / (1 - b2)) + eps)
        m2 = b1 * m1 + (1 - b1) * -0.3
        v2 = b2 * v1 + (1 - b2) * (-0.3 * -0.3)
        expected -= lr * (m2 / (1 - b1 ** 2)) / (math.sqrt(v2 / (1 - b2 ** 2)) + eps)
        self.assertLess(abs(p[0] - expected), 1e-12)

    def test_decoupled_weight_decay(self):
        params = {"w": np.array([[2.0, -4.0]])}
        state = OptimizerState(lr=0.1, weight_decay=0.01)
        for _ in range(3):
            adamw_step(state, params, {"w": np.zeros((1, 2))})
        np.testing.assert_allclose(params["w"], np.array([[2.0, -4.0]]) * (1 - 0.1 * 0.01) ** 3, rtol=1e-14)

    def test_decay_only_named_parameters(self):
        params = {"B.0": np.ones((2, 2)), "head.weight": np.ones((2, 2))}
        state = OptimizerState(lr=0.1, weight_decay=0.5, decay_names=frozenset({"B.0"}))
        adamw_step(state, params, {name: np.zeros((2, 2)) for name in params})
        np.testing.assert_allclose(params["B.0"], 0.95)
        np.testing.assert_array_equal(params["head.weight"], np.ones((2, 2)))

    def test_validation(self):
        for kwargs in ({"lr": -1.0}, {"beta1": 1.0}, {"beta2": -0.1}, {"eps": 0.0}, {"weight_decay": -0.1}):
            with self.assertRaises(ConfigError):
                OptimizerState(**kwargs)
        with self.assertRaises(ShapeError):
            adamw_step(OptimizerState(), {"p": np.zeros(2)}, {"p": np.zeros(3)})

# ========== ОБУЧЕНИЕ ЗАДАЧИ ==========

class TrainTaskTests(SimpleTestCase):
    """Тесты обучения адаптера задачи"""

    def test_memorizes_single_example(self):
        rng = np.random.default_rng(0)
        backbone = FrozenBackbone.build(input_dim=8, hidden_dim=8, seed=0)
        task = Task(1, (0, 1), rng.normal(size=(1, 8)), np.array([1]))
        report = train_task(task, backbone, None, Settings(rank=2, epochs=300, batch_size=1))
        self.assertLess(report.final_loss, 0.01)
        self.assertEqual(len(report.loss_trace), 300)

    def test_zero_lr_is_noop(self):
        """lr = 0: адаптер равен инициализации, alpha групп не меняются"""
        rng = np.random.default_rng(1)
        backbone = FrozenBackbone.build(input_dim=8, hidden_dim=8, seed=1)
        backbone.ensure_classes(2)
        registry = GroupRegistry(g_max=2, tau_sim=0.3)
        group = registry.new_group(base_rank=2)
        group.layers = random_layers(rng, backbone.layer_shapes, 2)
        group.alpha_g, group.member_count = 0.7, 1
        head_before = backbone.head_weight.copy()

        task = gaussian_task(rng, 2, (2, 3), 8, 10, 4.0)
        report = train_task(task, backbone, registry, Settings(lr=0.0, epochs=3, seed=5))
        expected = init_task_adapter(2, backbone.layer_shapes, 2, make_rng(5, "adapter", 2))
        for own, new in zip(expected.layers, report.adapter.layers):
            np.testing.assert_array_equal(own.B, new.B)
            np.testing.assert_array_equal(own.A, new.A)
        self.assertEqual(report.adapter.alpha, 1.0)
        self.assertEqual(group.alpha_g, 0.7)
        np.testing.assert_array_equal(backbone.head_weight[:2], head_before)

    def test_two_gaussian_task(self):
        """Разделимая бинарная задача: точность на отложенной выборке > 95%"""
        rng = np.random.default_rng(2)
        backbone = FrozenBackbone.build(input_dim=32, hidden_dim=64, seed=2)
        direction = rng.normal(size=32)
        direction /= np.linalg.norm(direction)

        def sample(n):
            x = np.vstack([4.0 * direction + rng.normal(size=(n, 32)), -4.0 * direction + rng.normal(size=(n, 32))])
            return x, np.concatenate([np.zeros(n, dtype=int), np.ones(n, dtype=int)])

        x_train, y_train = sample(200)
        x_test, y_test = sample(200)
        report = train_task(Task(1, (0, 1), x_train, y_train), backbone, None, Settings(rank=4, epochs=20))
        delta = [report.adapter.alpha * d for d in report.adapter.deltas()]
        predictions = np.argmax(backbone.forward_final(x_test, delta), axis=1)
        self.assertGreater(float(np.mean(predictions == y_test)), 0.95)

    def test_backbone_and_other_heads_untouched(self):
        rng = np.random.default_rng(3)
        backbone = FrozenBackbone.build(input_dim=8, hidden_dim=8, seed=3)
        checksum = backbone.checksum()
        train_task(gaussian_task(rng, 1, (0, 1), 8, 20, 4.0), backbone, None, Settings(epochs=3))
        head_after_first = backbone.head_weight[:2].copy()
        train_task(gaussian_task(rng, 2, (2, 3), 8, 20, 4.0), backbone, None, Settings(epochs=3))
        self.assertEqual(backbone.checksum(), checksum)
        np.testing.assert_array_equal(backbone.head_weight[:2], head_after_first)

    def test_group_alphas_trained_in_place(self):
        rng = np.random.default_rng(4)
        backbone = FrozenBackbone.build(input_dim=8, hidden_dim=8, seed=4)
        backbone.ensure_classes(2)
        for trainable in (True, False):
            registry = GroupRegistry(g_max=1, tau_sim=0.3)
            group = registry.new_group(base_rank=2)
            group.layers = random_layers(rng, backbone.layer_shapes, 2)
            group.alpha_g, group.member_count = 0.7, 1
            frozen_b = group.layers[0].B.copy()
            task = gaussian_task(rng, 2, (2, 3), 8, 20, 4.0)
            report = train_task(task, backbone, registry, Settings(epochs=2, train_group_alphas=trainable))
            self.assertEqual(group.alpha_g != 0.7, trainable)
            self.assertEqual(report.group_alphas, [group.alpha_g])
            np.testing.assert_array_equal(group.layers[0].B, frozen_b)

    def test_empty_dataset(self):
        backbone = FrozenBackbone.build(input_dim=8, hidden_dim=8, seed=0)
        with self.assertRaises(InputError):
            train_task(Task(1, (0, 1), np.zeros((0, 8)), np.zeros(0, dtype=int)), backbone, None, Settings())

    def test_divergence(self):
        """NaN в функции потерь — TrainingError"""
        backbone = FrozenBackbone.build(input_dim=8, hidden_dim=8, seed=0)
        x = np.full((4, 8), np.nan)
        with self.assertRaises(TrainingError):
            train_task(Task(1, (0, 1), x, np.array([0, 1, 0, 1])), backbone, None, Settings(epochs=1))

    def test_deterministic(self):
        reports = []
        for _ in range(2):
            rng = np.random.default_rng(5)
            backbone = FrozenBackbone.build(input_dim=8, hidden_dim=8, seed=5)
            reports.append(train_task(gaussian_task(rng, 1, (0, 1), 8, 20, 4.0), backbone, None, Settings(epochs=3)))
        self.assertEqual(reports[0].loss_trace, reports[1].loss_trace)
        np.testing.assert_array_equal(reports[0].adapter.layers[0].B, reports[1].adapter.layers[0].B)

    def test_new_rows_start_at_class_means(self):
        """lr = 0: строки новых классов равны средним признакам, смещения -|mu|^2 / 2"""
        rng = np.random.default_rng(6)
        backbone = FrozenBackbone.build(input_dim=8, hidden_dim=8, seed=6)
        task = gaussian_task(rng, 1, (0, 1), 8, 20, 4.0)
        _, cache = backbone.forward_train(task.x_train, ForwardContext())
        train_task(task, backbone, None, Settings(lr=0.0, epochs=1))
        for c in (0, 1):
            mean = cache.features[task.y_train == c].mean(axis=0)
            np.testing.assert_allclose(backbone.head_weight[c], mean, atol=1e-12)
            self.assertAlmostEqual(backbone.head_bias[c], -0.5 * float(mean @ mean), places=10)

    def test_random_head_init_keeps_seeded_rows(self):
        rng = np.random.default_rng(7)
        backbone = FrozenBackbone.build(input_dim=8, hidden_dim=8, seed=7)
        reference = FrozenBackbone.build(input_dim=8, hidden_dim=8, seed=7)
        reference.ensure_classes(2)
        task = gaussian_task(rng, 1, (0, 1), 8, 20, 4.0)
        train_task(task, backbone, None, Settings(lr=0.0, epochs=1, head_init="random"))
        np.testing.assert_array_equal(backbone.head_weight, reference.head_weight)
        np.testing.assert_array_equal(backbone.head_bias, reference.head_bias)
        with self.assertRaises(ConfigError):
            train_task(gaussian_task(rng, 2, (2, 3), 8, 20, 4.0), backbone, None, Settings(head_init="zeros"))

    def test_masked_training_keeps_row_sums(self):
        """Сумма строк и сумма смещений двухклассовой задачи не меняются при обучении"""
        sums = []
        for lr in (0.0, 1e-2):
            rng = np.random.default_rng(8)
            backbone = FrozenBackbone.build(input_dim=8, hidden_dim=8, seed=8)
            train_task(gaussian_task(rng, 1, (0, 1), 8, 30, 3.0), backbone, None, Settings(lr=lr, epochs=10))
            sums.append((backbone.head_weight.sum(axis=0), backbone.head_bias.sum()))
        (w_frozen, b_frozen), (w_trained, b_trained) = sums
        np.testing.assert_allclose(w_trained, w_frozen, atol=1e-8)
        self.assertAlmostEqual(b_trained, b_frozen, places=8)

    def test_heads_of_different_tasks_are_comparable(self):
        """После двух задач классы обеих различаются по всем четырём логитам, без номера задачи"""
        rng = np.random.default_rng(9)
        means = {c: 8.0 * rng.normal(size=32) / math.sqrt(32) for c in range(4)}

        def sample(class_ids, n):
            x = np.vstack([means[c] + rng.normal(size=(n, 32)) for c in class_ids])
            return x, np.concatenate([np.full(n, c) for c in class_ids])

        backbone = FrozenBackbone.build(input_dim=32, hidden_dim=64, seed=9)
        for task_id, class_ids in ((1, (0, 1)), (2, (2, 3))):
            x, y = sample(class_ids, 50)
            train_task(Task(task_id, class_ids, x, y), backbone, None, Settings(rank=4, lr=1e-3, epochs=3))
        for class_ids in ((0, 1), (2, 3)):
            x_test, y_test = sample(class_ids, 200)
            predictions = np.argmax(backbone.forward_plain(x_test), axis=1)
            self.assertGreater(float(np.mean(predictions == y_test)), 0.85, class_ids)

    def test_two_gaussian_task_close_to_logistic_regression(self):
        """Точность после обучения не хуже логистической регрессии на входах минус 5 п.п."""
        rng = np.random.default_rng(10)
        direction = rng.normal(size=32)
        direction /= np.linalg.norm(direction)

        def sample(n):
            x = np.vstack([2.5 * direction + rng.normal(size=(n, 32)), -2.5 * direction + rng.normal(size=(n, 32))])
            return x, np.concatenate([np.zeros(n, dtype=int), np.ones(n, dtype=int)])

        x_train, y_train = sample(200)
        x_test, y_test = sample(1000)

        w, b = np.zeros(32), 0.0
        for _ in range(500):
            p = 1.0 / (1.0 + np.exp(-(x_train @ w + b)))
            w -= 0.5 * x_train.T @ (p - y_train) / y_train.size
            b -= 0.5 * float(np.mean(p - y_train))
        oracle = float(np.mean(((x_test @ w + b) > 0).astype(int) == y_test))

        backbone = FrozenBackbone.build(input_dim=32, hidden_dim=64, seed=10)
        report = train_task(Task(1, (0, 1), x_train, y_train), backbone, None, Settings(rank=4, lr=1e-3, epochs=20))
        delta = [report.adapter.alpha * d for d in report.adapter.deltas()]
        accuracy = float(np.mean(np.argmax(backbone.forward_final(x_test, delta), axis=1) == y_test))
        self.assertGreater(oracle, 0.97)
        self.assertGreaterEqual(accuracy, oracle - 0.05)
