"""
Синтетические потоки задач для class-incremental обучения.

Каждый класс — гауссов кластер с единичной ковариацией и центром нормы
separation. В режиме clustered задачи с одинаковым t mod super_clusters делят суперцентр
и ось, вдоль которой разведены их классы. Поэтому дельты адаптеров таких задач
похожи, и группировке по сходству есть что найти.
"""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from core.exceptions import ConfigError, InputError
from core.files import atomic_write_text
from core.rng import make_rng

STREAM_CLUSTERED = "clustered"
STREAM_UNIFORM = "uniform"
STREAM_MODES = (STREAM_CLUSTERED, STREAM_UNIFORM)

SPLIT_TRAIN = "train"
SPLIT_TEST = "test"


@dataclass(frozen=True)
class StreamSpec:
    num_tasks: int = 20
    classes_per_task: int = 2
    input_dim: int = 32
    train_per_class: int = 100
    test_per_class: int = 100
    separation: float = 6.0
    mode: str = STREAM_CLUSTERED
    super_clusters: int = 2
    cluster_spread: float = 0.5
    class_offset: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("num_tasks", "classes_per_task", "input_dim", "train_per_class", "test_per_class", "super_clusters"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} должен быть >= 1, получено {getattr(self, name)}.")
        if not self.separation >= 0.0:
            raise ConfigError(f"separation должна быть >= 0, получено {self.separation}.")
        if not self.cluster_spread >= 0.0:
            raise ConfigError(f"cluster_spread должен быть >= 0, получено {self.cluster_spread}.")
        if not self.class_offset >= 0.0:
            raise ConfigError(f"class_offset должен быть >= 0, получено {self.class_offset}.")
        if self.mode not in STREAM_MODES:
            raise ConfigError(f"Неизвестный режим потока: {self.mode}.")

    @property
    def num_classes(self) -> int:
        return self.num_tasks * self.classes_per_task


@dataclass
class TaskDataset:
    task_id: int
    class_ids: tuple[int, ...]
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        if name == SPLIT_TRAIN:
            return self.x_train, self.y_train
        if name == SPLIT_TEST:
            return self.x_test, self.y_test
        raise InputError(f"Неизвестный сплит: {name}.")


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.normal(size=dim)
    return v / np.linalg.norm(v)


def _class_means(spec: StreamSpec) -> np.ndarray:
    """
    uniform: направление каждого класса случайно.
    clustered: у суперкластера k свой центр c_k и своя ось u_k. Центр класса c задачи t
    направлен по c_k + cluster_spread * r_t + class_offset * s_c * u_k, где k = t mod
    super_clusters, r_t — случайное смещение задачи, s_c равномерно лежат в [-1, 1].
    Задачи одного суперкластера различают свои классы вдоль общей оси u_k.
    """
    rng = make_rng(spec.seed, "class-means")
    centers = np.stack([_unit(rng, spec.input_dim) for _ in range(spec.super_clusters)])
    axes = np.stack([_unit(rng, spec.input_dim) for _ in range(spec.super_clusters)])
    if spec.classes_per_task > 1:
        steps = np.linspace(1.0, -1.0, spec.classes_per_task)
    else:
        steps = np.zeros(1)
    means = np.zeros((spec.num_classes, spec.input_dim))
    for t in range(spec.num_tasks):
        if spec.mode == STREAM_CLUSTERED:
            k = t % spec.super_clusters
            task_center = centers[k] + spec.cluster_spread * _unit(rng, spec.input_dim)
        for c in range(spec.classes_per_task):
            if spec.mode == STREAM_CLUSTERED:
                direction = task_center + spec.class_offset * steps[c] * axes[k]
                direction = direction / np.linalg.norm(direction)
            else:
                direction = _unit(rng, spec.input_dim)
            means[t * spec.classes_per_task + c] = spec.separation * direction
    return means


def _sample(rng: np.random.Generator, means: np.ndarray, class_ids: Sequence[int], per_class: int):
    xs, ys = [], []
    for class_id in class_ids:
        xs.append(means[class_id] + rng.normal(size=(per_class, means.shape[1])))
        ys.append(np.full(per_class, class_id, dtype=np.int64))
    return np.vstack(xs), np.concatenate(ys)


def generate_stream(spec: StreamSpec) -> list[TaskDataset]:
    """Детерминированно по spec.seed: повторная генерация побитно совпадает."""
    means = _class_means(spec)
    stream = []
    for t in range(spec.num_tasks):
        class_ids = tuple(range(t * spec.classes_per_task, (t + 1) * spec.classes_per_task))
        rng = make_rng(spec.seed, "samples", t)
        x_train, y_train = _sample(rng, means, class_ids, spec.train_per_class)
        x_test, y_test = _sample(rng, means, class_ids, spec.test_per_class)
        stream.append(TaskDataset(t + 1, class_ids, x_train, y_train, x_test, y_test))
    return stream


class ModelView(Protocol):
    num_classes: int

    def predict(self, x) -> np.ndarray: ...


def evaluate(model: ModelView, datasets: Sequence[TaskDataset], split: str = SPLIT_TEST) -> list[float]:
    """
    Top-1 точность по каждой задаче над всеми виденными классами.
    task_id используется только для группировки результата.
    """
    accuracies = []
    for dataset in datasets:
        x, y = dataset.split(split)
        if len(y) == 0:
            raise InputError(f"Задача {dataset.task_id}: пустой сплит {split}.")
        if max(dataset.class_ids) >= model.num_classes:
            raise InputError(
                f"Задача {dataset.task_id}: класс {max(dataset.class_ids)} не покрыт головой из {model.num_classes}."
            )
        predictions = np.asarray(model.predict(x)).reshape(-1)
        accuracies.append(float(np.mean(predictions == np.asarray(y))))
    return accuracies


# ---- Экспорт/импорт ----
def _split_rows(datasets: Sequence[TaskDataset], split: str) -> np.ndarray:
    blocks = []
    for dataset in datasets:
        x, y = dataset.split(split)
        ids = np.full((len(y), 1), dataset.task_id, dtype=np.float64)
        blocks.append(np.hstack([ids, np.asarray(y, dtype=np.float64).reshape(-1, 1), x]))
    return np.vstack(blocks) if blocks else np.zeros((0, 2))


def export_stream(datasets: Sequence[TaskDataset], directory: str | os.PathLike) -> list[Path]:
    """train.csv и test.csv: task_id,class_id,x_1..x_D — по строке на пример."""
    if not datasets:
        raise InputError("Нечего экспортировать: поток пуст.")
    dim = datasets[0].x_train.shape[1]
    fmt = ["%d", "%d"] + ["%.17g"] * dim
    paths = []
    for split in (SPLIT_TRAIN, SPLIT_TEST):
        buffer = io.StringIO()
        np.savetxt(buffer, _split_rows(datasets, split), fmt=fmt, delimiter=",")
        paths.append(atomic_write_text(Path(directory) / f"{split}.csv", buffer.getvalue()))
    return paths


def _load_split(path: Path) -> np.ndarray:
    if not path.exists():
        raise InputError(f"Файл потока не найден: {path}")
    try:
        return np.loadtxt(path, delimiter=",", ndmin=2)
    except ValueError as e:
        raise InputError(f"Не удалось разобрать {path}: {e}") from e


def import_stream(directory: str | os.PathLike) -> list[TaskDataset]:
    train = _load_split(Path(directory) / f"{SPLIT_TRAIN}.csv")
    test = _load_split(Path(directory) / f"{SPLIT_TEST}.csv")
    task_ids = sorted(set(train[:, 0].astype(int).tolist()) | set(test[:, 0].astype(int).tolist()))

    datasets = []
    for task_id in task_ids:
        tr = train[train[:, 0].astype(int) == task_id]
        te = test[test[:, 0].astype(int) == task_id]
        y_train = tr[:, 1].astype(np.int64)
        y_test = te[:, 1].astype(np.int64)
        class_ids = tuple(sorted(set(y_train.tolist()) | set(y_test.tolist())))
        datasets.append(TaskDataset(task_id, class_ids, tr[:, 2:], y_train, te[:, 2:], y_test))

    seen: set[int] = set()
    for dataset in datasets:
        if seen & set(dataset.class_ids):
            raise InputError(f"Задача {dataset.task_id}: классы пересекаются с предыдущими задачами.")
        seen |= set(dataset.class_ids)
    return datasets
