"""
Итоговое слияние групповых адаптеров и базовые алгоритмы слияния.

merge_ham:        dW = (1/M) * sum_i alpha_Gi * B_Gi @ A_Gi
merge_linear:     взвешенное среднее дельт
merge_ties:       обрезка по модулю -> выбор знака -> среднее согласных значений
merge_dare_ties:  случайное отбрасывание с перемасштабированием, затем TIES

Базовые алгоритмы работают с материализованными дельтами слоя (B @ A).
Все функции чистые: входы не изменяются.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from adapters.lora import GroupRegistry, LayerAdapter, delta_weight
from adapters.storage import KIND_MERGED, AdapterRecord
from core.exceptions import ConfigError, ShapeError, StateError
from core.rng import make_rng
from core.tensor import check_keep_fraction, top_k_mask


MERGE_HAM = "ham"
MERGE_LINEAR = "linear"
MERGE_TIES = "ties"
MERGE_DARE_TIES = "dare_ties"
MERGE_ALGORITHMS = (MERGE_HAM, MERGE_LINEAR, MERGE_TIES, MERGE_DARE_TIES)
BASELINE_ALGORITHMS = (MERGE_LINEAR, MERGE_TIES, MERGE_DARE_TIES)

DEFAULT_TIES_TRIM = 0.2
DEFAULT_TIES_LAMBDA = 1.0
DEFAULT_DARE_DROP = 0.5


@dataclass
class MergedDelta:
    """
    Объединённая дельта по слоям.

    factors заполняется, когда дельта известна в факторизованном виде (merge_ham):
    тогда B @ A каждого слоя совпадает с deltas, а ранг равен сумме рангов групп.
    """

    deltas: list[np.ndarray]
    provenance: list[dict] = field(default_factory=list)
    algorithm: str = MERGE_HAM
    factors: list[LayerAdapter] | None = None

    @property
    def rank(self) -> int | None:
        if self.factors:
            return self.factors[0].rank
        return None

    def as_record(self) -> AdapterRecord:
        if self.factors is not None:
            layers = [layer.copy() for layer in self.factors]
        else:
            # плотная дельта хранится как B = dW, A = I
            layers = [LayerAdapter(delta.copy(), np.eye(delta.shape[1])) for delta in self.deltas]
        metadata = {
            "algorithm": self.algorithm,
            "factored": self.factors is not None,
            "provenance": self.provenance,
        }
        return AdapterRecord(KIND_MERGED, 1.0, layers, metadata)

    @classmethod
    def from_record(cls, record: AdapterRecord) -> "MergedDelta":
        factored = bool(record.metadata.get("factored"))
        return cls(
            deltas=[record.alpha * delta_weight(layer) for layer in record.layers],
            provenance=list(record.metadata.get("provenance", [])),
            algorithm=record.metadata.get("algorithm", MERGE_HAM),
            factors=[layer.copy() for layer in record.layers] if factored and record.alpha == 1.0 else None,
        )


def _check_deltas(deltas: Sequence[np.ndarray]) -> list[np.ndarray]:
    if not deltas:
        raise ConfigError("Нужна хотя бы одна дельта.")
    arrays = [np.asarray(d, dtype=np.float64) for d in deltas]
    shape = arrays[0].shape
    for i, arr in enumerate(arrays):
        if arr.shape != shape:
            raise ShapeError(f"Дельта {i}: форма {arr.shape}, ожидалась {shape}.")
    return arrays


def merge_ham(registry: GroupRegistry) -> MergedDelta:
    """Снимок текущего реестра; сам реестр не меняется."""
    groups = [g for g in registry.groups if g.member_count > 0 and g.layers]
    if not groups:
        raise StateError("merge_ham: нет ни одной группы.")
    num_layers = len(groups[0].layers)
    if any(len(g.layers) != num_layers for g in groups):
        raise ShapeError("merge_ham: у групп разное число слоёв.")

    m = len(groups)
    deltas, factors = [], []
    for idx in range(num_layers):
        acc = np.zeros(groups[0].layers[idx].delta_shape)
        for group in groups:
            layer = group.layers[idx]
            if layer.delta_shape != acc.shape:
                raise ShapeError(f"merge_ham: слой {idx} группы {group.group_id} имеет форму {layer.delta_shape}.")
            acc += group.alpha_g * delta_weight(layer)
        deltas.append(acc / m)
        factors.append(
            LayerAdapter(
                np.hstack([(group.alpha_g / m) * group.layers[idx].B for group in groups]),
                np.vstack([group.layers[idx].A for group in groups]),
            )
        )
    provenance = [{"group_id": g.group_id, "alpha": float(g.alpha_g)} for g in groups]
    return MergedDelta(deltas=deltas, provenance=provenance, algorithm=MERGE_HAM, factors=factors)


def merge_linear(deltas: Sequence[np.ndarray], weights: Sequence[float] | None = None) -> np.ndarray:
    arrays = _check_deltas(deltas)
    if weights is None:
        weights = [1.0] * len(arrays)
    if len(weights) != len(arrays):
        raise ConfigError(f"Весов {len(weights)}, дельт {len(arrays)}.")
    total = float(sum(weights))
    if total == 0.0 or not math.isfinite(total):
        raise ConfigError("Сумма весов линейного слияния равна нулю.")
    acc = np.zeros_like(arrays[0])
    for w, arr in zip(weights, arrays):
        acc += float(w) * arr
    return acc / total


def _check_lambda(lam: float) -> float:
    lam = float(lam)
    if not math.isfinite(lam):
        raise ConfigError(f"lambda должна быть конечной, получено {lam}.")
    return lam


def merge_ties(
    deltas: Sequence[np.ndarray],
    trim_fraction: float = DEFAULT_TIES_TRIM,
    lam: float = DEFAULT_TIES_LAMBDA,
) -> np.ndarray:
    """
    1) в каждой дельте оставить долю trim_fraction элементов наибольшего модуля;
    2) знак позиции — знак суммы обрезанных значений (нулевая сумма — нулевой знак);
    3) среднее только по значениям, совпадающим по знаку с выбранным; умножить на lam.
    """
    arrays = _check_deltas(deltas)
    check_keep_fraction(trim_fraction, name="trim_fraction")
    lam = _check_lambda(lam)

    trimmed = np.stack([np.where(top_k_mask(arr, trim_fraction), arr, 0.0) for arr in arrays])
    elected = np.sign(trimmed.sum(axis=0))
    agree = ((elected > 0) & (trimmed > 0)) | ((elected < 0) & (trimmed < 0))
    kept = np.where(agree, trimmed, 0.0)
    counts = agree.sum(axis=0)
    merged = kept.sum(axis=0) / np.maximum(counts, 1)
    return lam * merged


def check_drop_prob(drop_prob: float) -> float:
    drop_prob = float(drop_prob)
    if not (0.0 <= drop_prob < 1.0):
        raise ConfigError(f"drop_prob должна лежать в [0, 1), получено {drop_prob}.")
    return drop_prob


def dare_rescale(delta: np.ndarray, drop_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Каждый элемент сохраняется с вероятностью 1 - p и делится на 1 - p; матожидание не меняется."""
    drop_prob = check_drop_prob(drop_prob)
    delta = np.asarray(delta, dtype=np.float64)
    keep = rng.random(delta.shape) < (1.0 - drop_prob)
    return np.where(keep, delta / (1.0 - drop_prob), 0.0)


def merge_dare_ties(
    deltas: Sequence[np.ndarray],
    drop_prob: float = DEFAULT_DARE_DROP,
    lam: float = DEFAULT_TIES_LAMBDA,
    seed: int = 0,
    trim_fraction: float = DEFAULT_TIES_TRIM,
    stream: int = 0,
) -> np.ndarray:
    """stream разделяет случайные потоки разных слоёв при одном seed."""
    arrays = _check_deltas(deltas)
    check_drop_prob(drop_prob)
    rng = make_rng(seed, "dare", stream)
    rescaled = [dare_rescale(arr, drop_prob, rng) for arr in arrays]
    return merge_ties(rescaled, trim_fraction=trim_fraction, lam=lam)


def merge_layerwise(
    sources: Sequence[Sequence[np.ndarray]],
    algorithm: str,
    weights: Sequence[float] | None = None,
    trim_fraction: float = DEFAULT_TIES_TRIM,
    lam: float = DEFAULT_TIES_LAMBDA,
    drop_prob: float = DEFAULT_DARE_DROP,
    seed: int = 0,
    provenance: list[dict] | None = None,
) -> MergedDelta:
    """
    Применяет базовый алгоритм к каждому слою отдельно.

    sources[i][l] — дельта слоя l i-го источника (адаптера задачи или группы).
    """
    if algorithm not in BASELINE_ALGORITHMS:
        raise ConfigError(f"Неизвестный базовый алгоритм слияния: {algorithm}.")
    if not sources:
        raise StateError("Нечего сливать: список источников пуст.")
    num_layers = len(sources[0])
    if any(len(src) != num_layers for src in sources):
        raise ShapeError("У источников разное число слоёв.")

    merged = []
    for idx in range(num_layers):
        layer_deltas = [src[idx] for src in sources]
        if algorithm == MERGE_LINEAR:
            merged.append(merge_linear(layer_deltas, weights))
        elif algorithm == MERGE_TIES:
            merged.append(merge_ties(layer_deltas, trim_fraction, lam))
        else:
            merged.append(merge_dare_ties(layer_deltas, drop_prob, lam, seed, trim_fraction, stream=idx))
    if provenance is None:
        provenance = [{"source": i} for i in range(len(sources))]
    return MergedDelta(deltas=merged, provenance=provenance, algorithm=algorithm)


class FinalModel:
    """
    Модель W0 + dW_merged для инференса по всем классам без идентификатора задачи.

    finalize передаёт сюда снимок сети: голова и дельты зафиксированы на момент
    слияния и не меняются при обучении следующих задач.
    """

    def __init__(self, backbone, merged: MergedDelta):
        self.backbone = backbone
        self.merged = merged

    @property
    def num_classes(self) -> int:
        return self.backbone.num_classes_seen

    def logits(self, x) -> np.ndarray:
        return self.backbone.forward_final(x, self.merged.deltas)

    def predict(self, x) -> np.ndarray:
        return np.argmax(np.atleast_2d(self.logits(x)), axis=1)


def zero_delta(backbone) -> MergedDelta:
    return MergedDelta(deltas=[np.zeros(shape) for shape in backbone.layer_shapes], algorithm=MERGE_LINEAR)


def finalize(backbone, merged: MergedDelta) -> FinalModel:
    shapes = backbone.layer_shapes
    if len(merged.deltas) != len(shapes):
        raise ShapeError(f"Дельт {len(merged.deltas)}, слоёв {len(shapes)}.")
    for idx, (delta, shape) in enumerate(zip(merged.deltas, shapes)):
        if np.shape(delta) != tuple(shape):
            raise ShapeError(f"Слой {idx}: дельта {np.shape(delta)}, вес {tuple(shape)}.")
    frozen = replace(merged, deltas=[np.array(delta, dtype=np.float64) for delta in merged.deltas])
    return FinalModel(backbone.snapshot(), frozen)
