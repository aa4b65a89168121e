import csv
import io
import json
import math
import tempfile
from pathlib import Path
from unittest.mock import patch

import numpy as np
from django.core.management import call_command
from django.core.management.base import CommandError
from django.db.utils import OperationalError
from django.test import SimpleTestCase, TestCase, override_settings

from adapters.lora import AdapterGroup, LayerAdapter
from adapters.storage import load_adapter, save_adapter
from core.exceptions import ConfigError, InputError, StateError, TrainingError

from .config import ExperimentConfig, config_from_mapping, load_config, load_sweep, resolve_output_dir
from .metrics import AccuracyMatrix, average_accuracy, forgetting_measure
from .models import ExperimentRun
from .run_service import ACCURACY_FILE, MERGED_ADAPTER_FILE, SUMMARY_FILE, run_experiment
from .run_service import run_experiment as real_run_experiment
from .streams import (
    STREAM_UNIFORM,
    StreamSpec,
    TaskDataset,
    _class_means,
    evaluate,
    export_stream,
    generate_stream,
    import_stream,
)
from .sweep_service import SWEEP_FILE

SMALL = {
    'num_tasks': '3',
    'classes_per_task': '2',
    'input_dim': '8',
    'hidden_dim': '8',
    'train_per_class': '15',
    'test_per_class': '10',
    'rank': '2',
    'epochs': '2',
    'batch_size': '16',
    'lr': '0.01',
}


def write_config(directory: Path, name='experiment.env', **values) -> Path:
    path = Path(directory) / name
    lines = ['# тестовый конфиг']
    lines += [f'{key}={value}' for key, value in {**SMALL, **values}.items()]
    path.write_text('\n'.join(lines) + '\n', encoding='utf-8')
    return path


class TempDirMixin:
    def setUp(self):
        super().setUp()
        self._tmp = tempfile.TemporaryDirectory()
        self.tmp = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()
        super().tearDown()


class LookupModel:
    """Модель, запомнившая обучающую выборку."""

    def __init__(self, datasets, num_classes):
        self.num_classes = num_classes
        self.table = {}
        for dataset in datasets:
            for x, y in zip(dataset.x_train, dataset.y_train):
                self.table[x.tobytes()] = int(y)

    def predict(self, x):
        return np.array([self.table[row.tobytes()] for row in np.atleast_2d(x)])


class RandomModel:
    def __init__(self, num_classes, seed=0):
        self.num_classes = num_classes
        self.rng = np.random.default_rng(seed)

    def predict(self, x):
        return self.rng.integers(0, self.num_classes, size=len(x))

# ========== ПОТОК ЗАДАЧ ==========

class StreamTests(TempDirMixin, SimpleTestCase):
    """Тесты генератора задач и оценки"""

    def test_disjoint_class_ids(self):
        stream = generate_stream(StreamSpec(num_tasks=2, classes_per_task=2, train_per_class=5, test_per_class=5))
        self.assertEqual([d.class_ids for d in stream], [(0, 1), (2, 3)])
        self.assertEqual([d.task_id for d in stream], [1, 2])
        self.assertEqual(stream[0].x_train.shape, (10, 32))
        self.assertEqual(set(stream[1].y_test.tolist()), {2, 3})

    def test_zero_separation_collapses_means(self):
        means = _class_means(StreamSpec(num_tasks=3, separation=0.0))
        self.assertFalse(means.any())

    def test_nearest_mean_oracle(self):
        """separation = 8, D = 32: оракул ближайшего среднего даёт > 99%"""
        spec = StreamSpec(num_tasks=4, separation=8.0, mode=STREAM_UNIFORM, seed=3)
        for dataset in generate_stream(spec):
            centers = np.stack([dataset.x_train[dataset.y_train == c].mean(axis=0) for c in dataset.class_ids])
            distances = ((dataset.x_test[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            predictions = np.asarray(dataset.class_ids)[np.argmin(distances, axis=1)]
            self.assertGreater(float(np.mean(predictions == dataset.y_test)), 0.99)

    def test_clustered_tasks_share_directions(self):
        """Задачи одного суперкластера ближе друг к другу, чем задачи разных"""
        spec = StreamSpec(num_tasks=8, super_clusters=2, seed=5)
        means = _class_means(spec)
        unit = means / np.linalg.norm(means, axis=1, keepdims=True)
        same, cross = [], []
        for a in range(spec.num_classes):
            for b in range(a + 1, spec.num_classes):
                ta, tb = a // spec.classes_per_task, b // spec.classes_per_task
                (same if ta % 2 == tb % 2 else cross).append(float(unit[a] @ unit[b]))
        self.assertGreater(np.mean(same), np.mean(cross) + 0.3)

    def test_clustered_tasks_share_class_axis(self):
        """Разности центров классов у задач одного суперкластера сонаправлены, у разных — нет"""
        spec = StreamSpec(num_tasks=8, super_clusters=2, seed=6)
        means = _class_means(spec)
        axes = means[0::2] - means[1::2]
        axes /= np.linalg.norm(axes, axis=1, keepdims=True)
        for a in range(spec.num_tasks):
            for b in range(a + 1, spec.num_tasks):
                cosine = abs(float(axes[a] @ axes[b]))
                if a % 2 == b % 2:
                    self.assertGreater(cosine, 0.8, (a, b))
                else:
                    self.assertLess(cosine, 0.8, (a, b))

    def test_deterministic(self):
        spec = StreamSpec(num_tasks=2, train_per_class=4, test_per_class=4, seed=11)
        a, b = generate_stream(spec), generate_stream(spec)
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.x_train, y.x_train)
            np.testing.assert_array_equal(x.y_test, y.y_test)

    def test_invalid_stream_params(self):
        for kwargs in ({'num_tasks': 0}, {'separation': -1.0}, {'mode': 'spiral'}, {'train_per_class': 0}):
            with self.assertRaises(ConfigError):
                StreamSpec(**kwargs)

    def test_memorizing_model_scores_full_on_train(self):
        stream = generate_stream(StreamSpec(num_tasks=3, train_per_class=6, test_per_class=2))
        model = LookupModel(stream, num_classes=6)
        self.assertEqual(evaluate(model, stream, split='train'), [1.0, 1.0, 1.0])

    def test_random_model_is_at_chance(self):
        """Случайная модель: точность 1/C в пределах трёх сигм"""
        classes = 10
        rng = np.random.default_rng(0)
        n = 3000
        dataset = TaskDataset(1, tuple(range(classes)), np.zeros((0, 4)), np.zeros(0, dtype=int),
                              rng.normal(size=(n, 4)), rng.integers(0, classes, size=n))
        accuracy = evaluate(RandomModel(classes), [dataset])[0]
        sigma = math.sqrt((1 / classes) * (1 - 1 / classes) / n)
        self.assertLess(abs(accuracy - 1 / classes), 3 * sigma)

    def test_empty_and_unseen(self):
        self.assertEqual(evaluate(RandomModel(2), []), [])
        stream = generate_stream(StreamSpec(num_tasks=2, train_per_class=2, test_per_class=2))
        with self.assertRaises(InputError):
            evaluate(RandomModel(2), stream)

    def test_export_import(self):
        stream = generate_stream(StreamSpec(num_tasks=2, input_dim=4, train_per_class=3, test_per_class=2))
        export_stream(stream, self.tmp)
        first_row = (self.tmp / 'train.csv').read_text().splitlines()[0].split(',')
        self.assertEqual(len(first_row), 2 + 4)
        restored = import_stream(self.tmp)
        self.assertEqual([d.class_ids for d in restored], [(0, 1), (2, 3)])
        for own, new in zip(stream, restored):
            np.testing.assert_array_equal(own.x_train, new.x_train)
            np.testing.assert_array_equal(own.y_test, new.y_test)

    def test_import_missing_files(self):
        with self.assertRaises(InputError):
            import_stream(self.tmp)

# ========== МЕТРИКИ ==========

class MetricsTests(SimpleTestCase):
    """Тесты AA и FM"""

    def test_average_accuracy_examples(self):
        self.assertEqual(average_accuracy(AccuracyMatrix.from_rows([[1.0], [1.0, 1.0]])), 1.0)
        self.assertAlmostEqual(average_accuracy(AccuracyMatrix.from_rows([[0.9], [0.4, 0.8]])), 0.6, places=12)

    def test_average_accuracy_matches_loop(self):
        rng = np.random.default_rng(1)
        n = 6
        rows = [list(rng.uniform(size=t)) for t in range(1, n + 1)]
        total = 0.0
        for value in rows[-1]:
            total += value
        self.assertAlmostEqual(average_accuracy(AccuracyMatrix.from_rows(rows)), total / n, places=12)

    def test_forgetting_single_term(self):
        for last in (0.0, 0.5, 1.0):
            fm = forgetting_measure(AccuracyMatrix.from_rows([[0.9], [0.7, last]]))
            self.assertAlmostEqual(fm, 0.2, places=12)

    def test_forgetting_non_decreasing_is_not_positive(self):
        rows = [[0.5], [0.6, 0.5], [0.7, 0.6, 0.9]]
        self.assertLessEqual(forgetting_measure(AccuracyMatrix.from_rows(rows)), 0.0)

    def test_forgetting_matches_brute_force(self):
        """Совпадает с перебором максимума по строкам до последней"""
        rng = np.random.default_rng(2)
        for n in range(2, 8):
            rows = [list(rng.uniform(size=t)) for t in range(1, n + 1)]
            drops = []
            for i in range(n - 1):
                peak = -1.0
                for t in range(i, n - 1):
                    peak = max(peak, rows[t][i])
                drops.append(peak - rows[n - 1][i])
            expected = sum(drops) / (n - 1)
            self.assertLess(abs(forgetting_measure(AccuracyMatrix.from_rows(rows)) - expected), 1e-12)

    def test_forgetting_shift_invariant(self):
        rng = np.random.default_rng(3)
        rows = [list(rng.uniform(0.0, 0.5, size=t)) for t in range(1, 5)]
        shifted = [[v + 0.3 for v in row] for row in rows]
        self.assertAlmostEqual(
            forgetting_measure(AccuracyMatrix.from_rows(rows)),
            forgetting_measure(AccuracyMatrix.from_rows(shifted)),
            places=12,
        )

    def test_errors(self):
        with self.assertRaises(StateError):
            forgetting_measure(AccuracyMatrix.from_rows([[0.5]]))
        incomplete = AccuracyMatrix(2)
        incomplete.record(1, 1, 0.5)
        with self.assertRaises(StateError):
            average_accuracy(incomplete)
        with self.assertRaises(InputError):
            incomplete.record(1, 2, 0.5)
        with self.assertRaises(InputError):
            incomplete.record(2, 1, 1.5)

    def test_csv_layout(self):
        text = AccuracyMatrix.from_rows([[0.9], [0.7, 0.8]]).to_csv()
        self.assertEqual(text, 'after_task,task_1,task_2\n1,0.900000,\n2,0.700000,0.800000\n')

# ========== КОНФИГ ==========

class ConfigTests(TempDirMixin, SimpleTestCase):
    """Тесты чтения и проверки конфига"""

    def test_defaults(self):
        config = config_from_mapping({})
        self.assertEqual(config.rank, 16)
        self.assertEqual(config.keep_fraction, 0.6)
        self.assertEqual(config.g_max, 2)
        self.assertEqual(config.tau_sim, 0.3)
        self.assertEqual(config.lr, 1e-3)
        self.assertEqual(config.batch_size, 64)
        self.assertEqual(config.num_tasks, 20)
        self.assertEqual(config.super_clusters, 2)
        self.assertEqual(config, ExperimentConfig())

    def test_load_file(self):
        path = write_config(self.tmp, strategy='naive_ft', train_group_alphas='false', seed='18446744073709551615')
        config = load_config(path)
        self.assertEqual(config.num_tasks, 3)
        self.assertEqual(config.strategy, 'naive_ft')
        self.assertFalse(config.train_group_alphas)
        self.assertEqual(config.seed, 2 ** 64 - 1)

    def test_out_of_range_values(self):
        for key, value in (('keep_fraction', '0'), ('keep_fraction', '1.2'), ('g_max', '0'), ('tau_sim', '2'),
                           ('dare_drop_prob', '1'), ('beta1', '1'), ('rank', '9'), ('seed', '-1'),
                           ('strategy', 'replay'), ('merge_algorithm', 'fisher'), ('head_init', 'zeros'),
                           ('ties_lambda', 'nan'), ('ties_lambda', 'inf'), ('ties_lambda', '-inf'), ('lr', 'nan'),
                           ('lr', 'inf'), ('separation', 'inf'), ('tau_sim', 'nan'), ('cluster_spread', 'nan'),
                           ('eps', 'inf'), ('weight_decay', 'nan'), ('beta1', 'nan')):
            with self.assertRaises(ConfigError, msg=f'{key}={value}'):
                load_config(write_config(self.tmp, **{key: value}))

    def test_unknown_key(self):
        with self.assertRaises(ConfigError) as ctx:
            load_config(write_config(self.tmp, kep_fraction='0.5'))
        self.assertIn('kep_fraction', str(ctx.exception))

    def test_per_task_merge_needs_baseline(self):
        with self.assertRaises(ConfigError):
            load_config(write_config(self.tmp, strategy='per_task_merge'))
        config = load_config(write_config(self.tmp, strategy='per_task_merge', merge_algorithm='linear'))
        self.assertEqual(config.merge_algorithm, 'linear')

    def test_missing_file(self):
        with self.assertRaises(ConfigError):
            load_config(self.tmp / 'absent.env')

    def test_sweep_keys_rejected_in_run_config(self):
        with self.assertRaises(ConfigError):
            load_config(write_config(self.tmp, sweep_g_max='1,2'))

    def test_sweep_grid(self):
        path = write_config(self.tmp, sweep_keep_fraction='0.2, 0.6', sweep_g_max='1,2,4')
        base, points = load_sweep(path)
        self.assertEqual(base.num_tasks, 3)
        self.assertEqual(len(points), 6)
        self.assertEqual(points[0][0], {'keep_fraction': '0.2', 'g_max': '1'})
        self.assertEqual(points[-1][1].keep_fraction, 0.6)
        self.assertEqual(points[-1][1].g_max, 4)

    def test_sweep_errors(self):
        with self.assertRaises(ConfigError):
            load_sweep(write_config(self.tmp))
        with self.assertRaises(ConfigError):
            load_sweep(write_config(self.tmp, sweep_keep_fraction=''))
        with self.assertRaises(ConfigError):
            load_sweep(write_config(self.tmp, sweep_rank='2,4'))
        with self.assertRaises(ConfigError):
            load_sweep(write_config(self.tmp, sweep_keep_fraction='0.5,1.5'))

    def test_output_dir_resolution(self):
        config = config_from_mapping({'output_dir': 'from-config'})
        with override_settings(HAM_OUTPUT_DIR=None):
            self.assertEqual(resolve_output_dir(config), Path('from-config'))
            self.assertEqual(resolve_output_dir(config_from_mapping({})).name, 'runs')
        with override_settings(HAM_OUTPUT_DIR=str(self.tmp / 'env')):
            self.assertEqual(resolve_output_dir(config), self.tmp / 'env')
            self.assertEqual(resolve_output_dir(config, self.tmp / 'cli'), self.tmp / 'cli')

# ========== ПРОГОН ЭКСПЕРИМЕНТА ==========

@override_settings(HAM_OUTPUT_DIR=None, HAM_RECORD_RUNS=True)
class RunExperimentTests(TempDirMixin, TestCase):
    """Сквозные прогоны на маленьком потоке"""

    def config(self, **values):
        return config_from_mapping({**SMALL, **values})

    def test_ham_outputs(self):
        result = run_experiment(self.config(save_groups='true'), self.tmp / 'ham')
        out = self.tmp / 'ham'
        for name in (ACCURACY_FILE, SUMMARY_FILE, MERGED_ADAPTER_FILE, 'run.log'):
            self.assertTrue((out / name).exists(), name)
        rows = list(csv.reader(io.StringIO((out / ACCURACY_FILE).read_text())))
        self.assertEqual(rows[0], ['after_task', 'task_1', 'task_2', 'task_3'])
        self.assertEqual(len(rows), 4)
        self.assertEqual(rows[1][2:], ['', ''])

        summary = json.loads((out / SUMMARY_FILE).read_text(encoding='utf-8'))
        self.assertAlmostEqual(summary['average_accuracy'], result.average_accuracy)
        self.assertLessEqual(summary['group_count'], 2)
        self.assertEqual(sum(g['member_count'] for g in summary['groups']), 3)
        self.assertEqual(sorted(summary['adapter_accuracy']), ['1', '2', '3'])
        self.assertLessEqual(summary['parameters']['nonzero'], summary['parameters']['dense'])
        for group in result.registry.groups:
            self.assertTrue((out / 'groups' / f'group_{group.group_id}.hama').exists())
        self.assertIn('После задачи 3', (out / 'run.log').read_text(encoding='utf-8'))

    def test_single_group_cap(self):
        """G_max = 1: одна группа со всеми задачами, ранг слияния N * r"""
        result = run_experiment(self.config(g_max='1'), self.tmp / 'one')
        self.assertEqual(len(result.registry), 1)
        self.assertEqual(result.registry.groups[0].member_count, 3)
        self.assertEqual(result.summary['merged_rank'], 6)
        merged = load_adapter(self.tmp / 'one' / MERGED_ADAPTER_FILE)
        self.assertEqual([layer.rank for layer in merged.layers], [6, 6])

    def test_group_cap_bookkeeping(self):
        for g_max in (1, 2, 4):
            result = run_experiment(self.config(g_max=str(g_max), num_tasks='4'), self.tmp / f'g{g_max}')
            self.assertLessEqual(len(result.registry), g_max)
            expected = sum(g.member_count * 2 for g in result.registry.groups)
            self.assertEqual(result.merged.rank, expected)

    def test_clustered_stream_groups_by_super_cluster(self):
        """Задачи одного суперкластера попадают в одну группу"""
        config = self.config(num_tasks='6', input_dim='32', hidden_dim='32', train_per_class='50',
                             rank='4', epochs='10', batch_size='25', lr='0.003', g_max='2', super_clusters='2')
        result = run_experiment(config, self.tmp / 'clustered')
        partition = sorted(sorted(group.member_task_ids) for group in result.registry.groups)
        self.assertEqual(partition, [[1, 3, 5], [2, 4, 6]])

    def test_short_stream_accuracy_far_above_chance(self):
        """Без номера задачи на входе итоговая точность далека от случайной, в том числе у последней задачи"""
        for strategy in ('ham', 'naive_ft'):
            config = self.config(strategy=strategy, num_tasks='4', input_dim='32', hidden_dim='64',
                                 train_per_class='50', test_per_class='50', rank='4', epochs='3', lr='0.001',
                                 batch_size='64', separation='8', stream_mode='uniform')
            result = run_experiment(config, self.tmp / strategy)
            self.assertGreater(result.average_accuracy, 0.6, strategy)
            self.assertGreater(result.accuracy.get(4, 4), 0.6, strategy)

    def test_rerun_is_byte_identical(self):
        config = self.config()
        run_experiment(config, self.tmp / 'a')
        run_experiment(config, self.tmp / 'b')
        for name in (ACCURACY_FILE, MERGED_ADAPTER_FILE, SUMMARY_FILE):
            self.assertEqual((self.tmp / 'a' / name).read_bytes(), (self.tmp / 'b' / name).read_bytes(), name)

    def test_naive_ft(self):
        result = run_experiment(self.config(strategy='naive_ft'), self.tmp / 'naive')
        self.assertIsNone(result.registry)
        self.assertEqual(len((self.tmp / 'naive' / ACCURACY_FILE).read_text().splitlines()), 4)
        self.assertEqual(result.merged.rank, 2)

    def test_per_task_merge_and_baselines(self):
        for algorithm in ('linear', 'ties', 'dare_ties'):
            result = run_experiment(
                self.config(strategy='per_task_merge', merge_algorithm=algorithm), self.tmp / algorithm
            )
            self.assertEqual(result.merged.algorithm, algorithm)
            self.assertTrue(0.0 <= result.average_accuracy <= 1.0)

    def test_ham_with_baseline_merge(self):
        result = run_experiment(self.config(merge_algorithm='ties'), self.tmp / 'ham-ties')
        self.assertEqual(result.merged.algorithm, 'ties')
        self.assertEqual(result.summary['merged_rank'], result.registry.merged_rank())

    def test_ledger_records_completed_run(self):
        result = run_experiment(self.config(), self.tmp / 'ledger', sweep_label='g_max=2')
        run = ExperimentRun.objects.get()
        self.assertTrue(run.is_completed)
        self.assertEqual(run.sweep_label, 'g_max=2')
        self.assertAlmostEqual(run.average_accuracy, result.average_accuracy)
        self.assertEqual(run.nonzero_parameters, result.nonzero_parameters)
        self.assertEqual(run.config['num_tasks'], 3)
        self.assertIsNotNone(run.finished_at)

    def test_ledger_records_failure(self):
        with patch('experiments.run_service.train_task', side_effect=TrainingError('loss = nan')):
            with self.assertRaises(TrainingError):
                run_experiment(self.config(), self.tmp / 'fail')
        run = ExperimentRun.objects.get()
        self.assertEqual(run.status, ExperimentRun.STATUS_FAILED)
        self.assertIn('nan', run.error_message)
        self.assertFalse((self.tmp / 'fail' / ACCURACY_FILE).exists())

    def test_runs_without_ledger_table(self):
        with patch.object(ExperimentRun.objects, 'create', side_effect=OperationalError('no such table')):
            result = run_experiment(self.config(), self.tmp / 'no-db')
        self.assertTrue((result.output_dir / ACCURACY_FILE).exists())

    @override_settings(HAM_RECORD_RUNS=False)
    def test_ledger_disabled(self):
        run_experiment(self.config(), self.tmp / 'off')
        self.assertEqual(ExperimentRun.objects.count(), 0)

# ========== КОМАНДЫ ==========

@override_settings(HAM_OUTPUT_DIR=None)
class CommandTests(TempDirMixin, TestCase):
    """Тесты management-команд run / sweep / inspect / merge"""

    def call(self, *args, **kwargs):
        out = io.StringIO()
        call_command(*args, stdout=out, stderr=io.StringIO(), **kwargs)
        return out.getvalue()

    def test_run_success(self):
        output = self.call('run', str(write_config(self.tmp)), output_dir=str(self.tmp / 'out'))
        self.assertIn('AA:', output)
        self.assertTrue((self.tmp / 'out' / ACCURACY_FILE).exists())

    def test_run_uses_env_override(self):
        with override_settings(HAM_OUTPUT_DIR=str(self.tmp / 'env')):
            self.call('run', str(write_config(self.tmp, output_dir=str(self.tmp / 'cfg'))))
        self.assertTrue((self.tmp / 'env' / ACCURACY_FILE).exists())
        self.assertFalse((self.tmp / 'cfg').exists())

    def test_run_invalid_config_exit_2(self):
        with self.assertRaises(CommandError) as ctx:
            self.call('run', str(write_config(self.tmp, keep_fraction='1.5')))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_run_divergence_exit_3(self):
        with patch('experiments.run_service.train_task', side_effect=TrainingError('loss = nan')):
            with self.assertRaises(CommandError) as ctx:
                self.call('run', str(write_config(self.tmp)), output_dir=str(self.tmp / 'out'))
        self.assertEqual(ctx.exception.returncode, 3)

    def test_sweep_singleton_matches_run(self):
        """Сетка из одной точки даёт тот же CSV, что и обычный прогон"""
        self.call('run', str(write_config(self.tmp, keep_fraction='0.4')), output_dir=str(self.tmp / 'run'))
        path = write_config(self.tmp, name='sweep.env', sweep_keep_fraction='0.4')
        self.call('sweep', str(path), output_dir=str(self.tmp / 'sweep'))
        self.assertEqual(
            (self.tmp / 'run' / ACCURACY_FILE).read_bytes(),
            (self.tmp / 'sweep' / 'point_000' / ACCURACY_FILE).read_bytes(),
        )
        rows = list(csv.DictReader(io.StringIO((self.tmp / 'sweep' / SWEEP_FILE).read_text())))
        self.assertEqual(len(rows), 1)
        self.assertEqual(rows[0]['keep_fraction'], '0.4')
        self.assertEqual(rows[0]['status'], 'ok')

    def test_sweep_empty_grid_exit_2(self):
        with self.assertRaises(CommandError) as ctx:
            self.call('sweep', str(write_config(self.tmp)), output_dir=str(self.tmp / 'sweep'))
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertFalse((self.tmp / 'sweep').exists())

    def test_sweep_continues_after_failure(self):
        def flaky(config, output_dir, sweep_label=''):
            if config.g_max == 1:
                raise TrainingError('loss = nan')
            return real_run_experiment(config, output_dir, sweep_label=sweep_label)

        path = write_config(self.tmp, name='sweep.env', sweep_g_max='1,2')
        with patch('experiments.sweep_service.run_experiment', side_effect=flaky):
            with self.assertRaises(CommandError) as ctx:
                self.call('sweep', str(path), output_dir=str(self.tmp / 'sweep'))
        self.assertNotEqual(ctx.exception.returncode, 0)
        rows = list(csv.DictReader(io.StringIO((self.tmp / 'sweep' / SWEEP_FILE).read_text())))
        self.assertEqual([row['status'] for row in rows], ['failed', 'ok'])
        self.assertIn('TrainingError', rows[0]['error'])
        self.assertTrue((self.tmp / 'sweep' / 'point_001' / ACCURACY_FILE).exists())

    def test_sweep_records_unexpected_error(self):
        """Ошибка вне иерархии HamError тоже записывается в строку точки, перебор идёт дальше"""
        def broken(config, output_dir, sweep_label=''):
            if config.g_max == 1:
                raise ValueError('operands could not be broadcast together')
            return real_run_experiment(config, output_dir, sweep_label=sweep_label)

        path = write_config(self.tmp, name='sweep.env', sweep_g_max='1,2')
        with patch('experiments.sweep_service.run_experiment', side_effect=broken):
            with self.assertRaises(CommandError) as ctx:
                self.call('sweep', str(path), output_dir=str(self.tmp / 'sweep'))
        self.assertEqual(ctx.exception.returncode, 1)
        rows = list(csv.DictReader(io.StringIO((self.tmp / 'sweep' / SWEEP_FILE).read_text())))
        self.assertEqual([row['status'] for row in rows], ['failed', 'ok'])
        self.assertIn('ValueError', rows[0]['error'])
        self.assertTrue((self.tmp / 'sweep' / 'point_001' / ACCURACY_FILE).exists())

    def _group_file(self, name, seed, rank=2):
        rng = np.random.default_rng(seed)
        layers = [LayerAdapter(rng.normal(size=(8, rank)), rng.normal(size=(rank, 8))) for _ in range(2)]
        group = AdapterGroup(seed, layers, 0.5, 2, [1, 2], rank // 2 or 1)
        return save_adapter(self.tmp / name, group)

    def test_inspect(self):
        output = self.call('inspect', str(self._group_file('g.hama', 1)))
        self.assertIn('Вид: group', output)
        self.assertIn('d=8 k=8 r=2', output)
        self.assertIn('member_count: 2', output)

    def test_inspect_corrupt_file_exit_2(self):
        path = self.tmp / 'bad.hama'
        path.write_bytes(b'NOPE' + b'\x00' * 40)
        with self.assertRaises(CommandError) as ctx:
            self.call('inspect', str(path))
        self.assertEqual(ctx.exception.returncode, 2)

    def test_merge_ham(self):
        files = [str(self._group_file('a.hama', 1)), str(self._group_file('b.hama', 2, rank=4))]
        self.call('merge', *files, algo='ham', output=str(self.tmp / 'merged.hama'))
        merged = load_adapter(self.tmp / 'merged.hama')
        self.assertEqual(merged.kind, 'merged')
        self.assertEqual(merged.layers[0].rank, 6)

    def test_merge_baseline(self):
        files = [str(self._group_file('a.hama', 1)), str(self._group_file('b.hama', 2))]
        self.call('merge', *files, algo='linear', weights='1,3', output=str(self.tmp / 'linear.hama'))
        merged = load_adapter(self.tmp / 'linear.hama')
        self.assertEqual(merged.metadata['algorithm'], 'linear')
        self.assertFalse(merged.metadata['factored'])

    def test_merge_bad_weights_exit_2(self):
        files = [str(self._group_file('a.hama', 1)), str(self._group_file('b.hama', 2))]
        with self.assertRaises(CommandError) as ctx:
            self.call('merge', *files, algo='linear', weights='1', output=str(self.tmp / 'x.hama'))
        self.assertEqual(ctx.exception.returncode, 2)
