"""
Модель данных LoRA-адаптеров.

Для слоя W0 размера d x k адаптер хранит B (d x r) и A (r x k),
дельта весов dW = B @ A. Групповой адаптер получается конкатенацией
прореженных адаптеров участников, поэтому его ранг растёт на r за участника.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import numpy as np

from core.exceptions import ConfigError, ShapeError, StateError
from core.tensor import as_matrix, matmul

LORA_INIT_STD = 0.02

GROUPING_SIMILARITY = "similarity"
GROUPING_ORTHOGONALITY = "orthogonality"
GROUPING_RULES = (GROUPING_SIMILARITY, GROUPING_ORTHOGONALITY)

SCOPE_LAST = "last"
SCOPE_ALL = "all"
SIMILARITY_SCOPES = (SCOPE_LAST, SCOPE_ALL)


@dataclass
class LayerAdapter:
    B: np.ndarray
    A: np.ndarray

    def __post_init__(self):
        self.B = as_matrix(self.B)
        self.A = as_matrix(self.A)
        if self.B.shape[1] != self.A.shape[0]:
            raise ShapeError(
                f"LayerAdapter: B {self.B.shape} и A {self.A.shape} — ранги не совпадают."
            )

    @property
    def rank(self) -> int:
        return self.B.shape[1]

    @property
    def out_features(self) -> int:
        return self.B.shape[0]

    @property
    def in_features(self) -> int:
        return self.A.shape[1]

    @property
    def delta_shape(self) -> tuple[int, int]:
        return self.out_features, self.in_features

    def copy(self) -> "LayerAdapter":
        return LayerAdapter(self.B.copy(), self.A.copy())


def delta_weight(layer: LayerAdapter) -> np.ndarray:
    """dW = B @ A, матрица d x k."""
    return matmul(layer.B, layer.A)


class HasLayers(Protocol):
    layers: list[LayerAdapter]


@dataclass
class TaskAdapter:
    """Адаптер одной задачи и его обучаемый коэффициент важности alpha."""

    task_id: int
    layers: list[LayerAdapter]
    alpha: float = 1.0

    @property
    def rank(self) -> int:
        return self.layers[0].rank if self.layers else 0

    def deltas(self) -> list[np.ndarray]:
        return [delta_weight(layer) for layer in self.layers]

    def copy(self) -> "TaskAdapter":
        return TaskAdapter(self.task_id, [layer.copy() for layer in self.layers], float(self.alpha))


@dataclass
class AdapterGroup:
    """
    Групповой адаптер.

    Индивидуальные alpha участников не хранятся: alpha_g — скользящее среднее,
    member_count — число вставок. Пустая группа (member_count == 0) существует
    только между созданием и первой конкатенацией.
    """

    group_id: int
    layers: list[LayerAdapter] = field(default_factory=list)
    alpha_g: float = 0.0
    member_count: int = 0
    member_task_ids: list[int] = field(default_factory=list)
    base_rank: int | None = None

    @property
    def rank(self) -> int:
        return self.layers[0].rank if self.layers else 0

    def deltas(self) -> list[np.ndarray]:
        return [delta_weight(layer) for layer in self.layers]

    def copy(self) -> "AdapterGroup":
        return AdapterGroup(
            group_id=self.group_id,
            layers=[layer.copy() for layer in self.layers],
            alpha_g=float(self.alpha_g),
            member_count=self.member_count,
            member_task_ids=list(self.member_task_ids),
            base_rank=self.base_rank,
        )


@dataclass
class GroupRegistry:
    g_max: int
    tau_sim: float
    grouping_rule: str = GROUPING_SIMILARITY
    similarity_scope: str = SCOPE_LAST
    groups: list[AdapterGroup] = field(default_factory=list)

    def __post_init__(self):
        if int(self.g_max) < 1:
            raise ConfigError(f"g_max должен быть >= 1, получено {self.g_max}.")
        if not (0.0 <= float(self.tau_sim) <= 1.0):
            raise ConfigError(f"tau_sim должен лежать в [0, 1], получено {self.tau_sim}.")
        if self.grouping_rule not in GROUPING_RULES:
            raise ConfigError(f"Неизвестное правило группировки: {self.grouping_rule}.")
        if self.similarity_scope not in SIMILARITY_SCOPES:
            raise ConfigError(f"Неизвестная область сходства: {self.similarity_scope}.")

    def __len__(self) -> int:
        return len(self.groups)

    @property
    def is_full(self) -> bool:
        return len(self.groups) >= self.g_max

    def get(self, group_id: int) -> AdapterGroup:
        for group in self.groups:
            if group.group_id == group_id:
                return group
        raise StateError(f"Группа {group_id} не найдена.")

    def new_group(self, base_rank: int | None = None) -> AdapterGroup:
        if self.is_full:
            raise StateError(f"Достигнут предел групп G_max={self.g_max}.")
        group = AdapterGroup(group_id=len(self.groups), base_rank=base_rank)
        self.groups.append(group)
        return group

    def alphas(self) -> list[float]:
        return [float(g.alpha_g) for g in self.groups]

    def merged_rank(self) -> int:
        """Ранг объединённого адаптера: сумма рангов групп (m * r по каждой группе)."""
        return sum(g.rank for g in self.groups)

    def membership(self) -> list[dict]:
        return [
            {
                "group_id": g.group_id,
                "member_count": g.member_count,
                "member_task_ids": list(g.member_task_ids),
                "rank": g.rank,
                "alpha_g": float(g.alpha_g),
            }
            for g in self.groups
        ]


def init_task_adapter(
    task_id: int,
    layer_shapes: Sequence[tuple[int, int]],
    rank: int,
    rng: np.random.Generator,
    std: float = LORA_INIT_STD,
) -> TaskAdapter:
    """B ~ N(0, std^2), A = 0: начальная дельта нулевая, alpha = 1."""
    layers = []
    for d, k in layer_shapes:
        if rank < 1 or rank > min(d, k):
            raise ConfigError(f"Ранг {rank} недопустим для слоя {d}x{k}: нужно 1 <= r <= min(d, k).")
        layers.append(LayerAdapter(rng.normal(0.0, std, size=(d, rank)), np.zeros((rank, k))))
    return TaskAdapter(task_id=task_id, layers=layers, alpha=1.0)


def _matrices(adapters: Iterable[HasLayers]):
    for adapter in adapters:
        for layer in adapter.layers:
            yield layer.B
            yield layer.A


def nonzero_parameter_count(adapter: HasLayers) -> int:
    """Число элементов B и A с |x| > 0 по всем слоям."""
    return int(sum(np.count_nonzero(m) for m in _matrices([adapter])))


def dense_parameter_count(adapter: HasLayers) -> int:
    """r * (d + k) по всем слоям, без учёта нулей."""
    return int(sum(m.size for m in _matrices([adapter])))
