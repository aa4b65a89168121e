"""
Метрики continual learning по матрице точностей.

a[t][i] — точность на тестовом наборе задачи i после обучения задачи t,
1 <= i <= t <= N (индексы с единицы, как в CSV).
"""

from __future__ import annotations

import csv
import io
from typing import Sequence

import numpy as np

from core.exceptions import InputError, StateError


class AccuracyMatrix:
    def __init__(self, num_tasks: int):
        if num_tasks < 1:
            raise InputError(f"num_tasks должен быть >= 1, получено {num_tasks}.")
        self.num_tasks = int(num_tasks)
        self.values = np.full((self.num_tasks, self.num_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[float]]) -> "AccuracyMatrix":
        """rows[t - 1] — точности после задачи t (длина t)."""
        matrix = cls(len(rows))
        for t, row in enumerate(rows, start=1):
            matrix.record_row(t, row)
        return matrix

    def _check(self, after_task: int, task: int) -> None:
        if not (1 <= task <= after_task <= self.num_tasks):
            raise InputError(f"Ячейка a[{after_task}][{task}] вне нижнего треугольника {self.num_tasks}x{self.num_tasks}.")

    def record(self, after_task: int, task: int, accuracy: float) -> None:
        self._check(after_task, task)
        accuracy = float(accuracy)
        if not (0.0 <= accuracy <= 1.0):
            raise InputError(f"Точность {accuracy} вне [0, 1].")
        self.values[after_task - 1, task - 1] = accuracy

    def record_row(self, after_task: int, accuracies: Sequence[float]) -> None:
        if len(accuracies) > after_task:
            raise InputError(f"После задачи {after_task} известно не более {after_task} точностей.")
        for task, accuracy in enumerate(accuracies, start=1):
            self.record(after_task, task, accuracy)

    def get(self, after_task: int, task: int) -> float:
        self._check(after_task, task)
        return float(self.values[after_task - 1, task - 1])

    def row(self, after_task: int) -> list[float]:
        return [self.get(after_task, i) for i in range(1, after_task + 1)]

    def is_row_complete(self, after_task: int) -> bool:
        return not any(np.isnan(v) for v in self.row(after_task))

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["after_task", *[f"task_{i}" for i in range(1, self.num_tasks + 1)]])
        for t in range(1, self.num_tasks + 1):
            cells = []
            for i in range(1, self.num_tasks + 1):
                value = self.values[t - 1, i - 1]
                cells.append("" if i > t or np.isnan(value) else f"{value:.6f}")
            writer.writerow([t, *cells])
        return buffer.getvalue()


def _final_row(m: AccuracyMatrix) -> list[float]:
    if not m.is_row_complete(m.num_tasks):
        raise StateError(f"Строка {m.num_tasks} матрицы точностей не заполнена.")
    return m.row(m.num_tasks)


def average_accuracy(m: AccuracyMatrix) -> float:
    """(1/N) * sum_i a[N][i]."""
    final = _final_row(m)
    return float(sum(final) / len(final))


def forgetting_measure(m: AccuracyMatrix) -> float:
    """
    (1/(N-1)) * sum_{i<N} [max_{i<=t<=N-1} a[t][i] - a[N][i]].

    Пик берётся без последней строки; отрицательное значение — обратный перенос.
    """
    n = m.num_tasks
    if n < 2:
        raise StateError("Мера забывания определена только для N >= 2.")
    final = _final_row(m)
    drops = []
    for i in range(1, n):
        history = [m.get(t, i) for t in range(i, n)]
        if any(np.isnan(v) for v in history):
            raise StateError(f"Для задачи {i} не хватает промежуточных точностей.")
        drops.append(max(history) - final[i - 1])
    return float(sum(drops) / len(drops))
