"""
Плотные линейно-алгебраические ядра поверх numpy.

Матрица — двумерный np.ndarray float64. Все функции чистые: входы не
изменяются, результат — новый массив.
"""

from __future__ import annotations

import math

import numpy as np

from .exceptions import ConfigError, DegenerateInputError, ShapeError

Matrix = np.ndarray
Vector = np.ndarray


def as_matrix(data, rows: int | None = None, cols: int | None = None) -> Matrix:
    """Приводит данные к матрице float64; при заданных rows/cols данные трактуются как row-major."""
    m = np.asarray(data, dtype=np.float64)
    if rows is not None and cols is not None:
        if m.size != rows * cols:
            raise ShapeError(f"Ожидалось {rows * cols} элементов, получено {m.size}.")
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ShapeError(f"Матрица должна быть двумерной, получено ndim={m.ndim}.")
    return m


def ensure_finite(m: np.ndarray, what: str = "матрица") -> np.ndarray:
    if not np.all(np.isfinite(m)):
        raise DegenerateInputError(f"{what}: обнаружены NaN/Inf.")
    return m


def matmul(lhs: Matrix, rhs: Matrix) -> Matrix:
    lhs = as_matrix(lhs)
    rhs = as_matrix(rhs)
    if lhs.shape[1] != rhs.shape[0]:
        raise ShapeError(f"matmul: {lhs.shape} x {rhs.shape} — несовпадение внутренних размерностей.")
    return lhs @ rhs


def vectorize(m: Matrix) -> Vector:
    """Row-major развёртка матрицы в вектор длины rows * cols."""
    return np.ascontiguousarray(as_matrix(m)).reshape(-1).copy()


def abs_cosine(u: Vector, v: Vector) -> float:
    """
    |<u, v>| / (||u|| * ||v||).

    Антипараллельные векторы дают 1.0. Вектор нулевой нормы — ошибка:
    нулевой адаптер означает сбой обучения, и вызывающий должен об этом узнать.
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ShapeError(f"abs_cosine: длины векторов различаются ({u.size} и {v.size}).")
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        raise DegenerateInputError("abs_cosine: вектор нулевой нормы.")
    value = abs(float(np.dot(u, v))) / (nu * nv)
    # округление может дать 1 + eps
    return min(value, 1.0)


def retained_count(keep_fraction: float, numel: int) -> int:
    """ceil(k * n); k * n округляется до 9 знаков, чтобы 0.3 * 10 не превращалось в 4."""
    check_keep_fraction(keep_fraction)
    if numel == 0:
        return 0
    return min(numel, max(1, math.ceil(round(keep_fraction * numel, 9))))


def check_keep_fraction(keep_fraction: float, name: str = "keep_fraction") -> None:
    if not (0.0 < float(keep_fraction) <= 1.0) or math.isnan(float(keep_fraction)):
        raise ConfigError(f"{name} должен лежать в (0, 1], получено {keep_fraction}.")


def magnitude_order(m: Matrix) -> np.ndarray:
    """
    Row-major индексы элементов по убыванию модуля.

    При равных модулях раньше идёт элемент с меньшим row-major индексом.
    """
    flat = np.abs(vectorize(m))
    index = np.arange(flat.size)
    # lexsort сортирует по последнему ключу первым
    return np.lexsort((index, -flat))


def top_k_mask(m: Matrix, keep_fraction: float) -> np.ndarray:
    """Булева маска формы m: True ровно у ceil(k * n) элементов наибольшего модуля."""
    m = as_matrix(m)
    count = retained_count(keep_fraction, m.size)
    mask = np.zeros(m.size, dtype=bool)
    mask[magnitude_order(m)[:count]] = True
    return mask.reshape(m.shape)


def magnitude_threshold(m: Matrix, keep_fraction: float) -> float:
    """
    Порог tau: модуль последнего сохраняемого элемента.

    Все элементы с |x| > tau сохраняются; из элементов с |x| == tau сохраняются
    первые по row-major индексу, пока не наберётся ceil(k * n).
    """
    m = as_matrix(m)
    count = retained_count(keep_fraction, m.size)
    if count == 0:
        return 0.0
    last = magnitude_order(m)[count - 1]
    return float(np.abs(m.reshape(-1)[last]))
