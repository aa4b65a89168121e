"""
Консолидация адаптера задачи в группы.

Порядок шагов после обучения задачи: выбор группы (или создание новой),
прореживание по модулю, конкатенация в групповой адаптер, обновление alpha_g.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from core.exceptions import ShapeError
from core.tensor import abs_cosine, check_keep_fraction, top_k_mask, vectorize

from .lora import (
    GROUPING_SIMILARITY,
    SCOPE_LAST,
    AdapterGroup,
    GroupRegistry,
    LayerAdapter,
    TaskAdapter,
    delta_weight,
)

logger = logging.getLogger(__name__)

ACTION_JOIN = "join"
ACTION_CREATE = "create"


@dataclass(frozen=True)
class GroupDecision:
    action: str
    group_id: int | None = None
    similarities: tuple[float, ...] = ()

    @property
    def creates_group(self) -> bool:
        return self.action == ACTION_CREATE


@dataclass(frozen=True)
class ConsolidationResult:
    decision: GroupDecision
    group_id: int
    pruned: TaskAdapter


def similarity(adapter: TaskAdapter, group: AdapterGroup, scope: str = SCOPE_LAST) -> float:
    """
    Модуль косинуса между векторизованными дельтами последнего слоя адаптера и группы.

    scope="all" усредняет ту же величину по всем слоям.
    """
    if not adapter.layers or not group.layers:
        raise ShapeError("similarity: у адаптера или группы нет слоёв.")
    if len(adapter.layers) != len(group.layers):
        raise ShapeError(
            f"similarity: число слоёв различается ({len(adapter.layers)} и {len(group.layers)})."
        )
    if scope == SCOPE_LAST:
        pairs = [(adapter.layers[-1], group.layers[-1])]
    else:
        pairs = list(zip(adapter.layers, group.layers))

    values = []
    for own, other in pairs:
        if own.delta_shape != other.delta_shape:
            raise ShapeError(f"similarity: формы дельт {own.delta_shape} и {other.delta_shape} различаются.")
        values.append(abs_cosine(vectorize(delta_weight(own)), vectorize(delta_weight(other))))
    return float(np.mean(values))


def assign_group(adapter: TaskAdapter, registry: GroupRegistry) -> GroupDecision:
    """
    Правило по сходству: присоединиться к самой похожей группе, если сходство >= tau_sim;
    иначе создать группу, пока их меньше G_max; иначе — к самой похожей без порога.

    Правило ортогональности зеркально: кандидат — группа с наименьшим сходством,
    присоединение при сходстве <= tau_sim.
    """
    if not registry.groups:
        return GroupDecision(ACTION_CREATE)

    sims = tuple(similarity(adapter, g, registry.similarity_scope) for g in registry.groups)
    if registry.grouping_rule == GROUPING_SIMILARITY:
        best = int(np.argmax(sims))
        passes = sims[best] >= registry.tau_sim
    else:
        best = int(np.argmin(sims))
        passes = sims[best] <= registry.tau_sim

    best_id = registry.groups[best].group_id
    if passes:
        return GroupDecision(ACTION_JOIN, best_id, sims)
    if not registry.is_full:
        return GroupDecision(ACTION_CREATE, None, sims)
    return GroupDecision(ACTION_JOIN, best_id, sims)


def update_group_alpha(group: AdapterGroup, alpha_j: float) -> float:
    """Скользящее среднее alpha_g; для только что созданной группы alpha_g = alpha_j."""
    alpha_j = float(alpha_j)
    if group.member_count == 0:
        group.alpha_g = alpha_j
    else:
        group.alpha_g = group.alpha_g + (alpha_j - group.alpha_g) / (group.member_count + 1)
    group.member_count += 1
    return group.alpha_g


def prune(adapter: TaskAdapter, keep_fraction: float) -> TaskAdapter:
    """B и A каждого слоя прореживаются независимо, каждая со своим порогом; формы не меняются."""
    check_keep_fraction(keep_fraction)
    layers = [
        LayerAdapter(
            np.where(top_k_mask(layer.B, keep_fraction), layer.B, 0.0),
            np.where(top_k_mask(layer.A, keep_fraction), layer.A, 0.0),
        )
        for layer in adapter.layers
    ]
    return TaskAdapter(task_id=adapter.task_id, layers=layers, alpha=float(adapter.alpha))


def concat_into_group(group: AdapterGroup, pruned: TaskAdapter) -> AdapterGroup:
    """B_G = [B_G, B], A_G = [A_G; A]; ранг группы растёт на r."""
    if not group.layers:
        group.layers = [layer.copy() for layer in pruned.layers]
        group.base_rank = pruned.rank
    else:
        if len(group.layers) != len(pruned.layers):
            raise ShapeError(
                f"concat: у группы {len(group.layers)} слоёв, у адаптера {len(pruned.layers)}."
            )
        if group.base_rank is not None and pruned.rank != group.base_rank:
            raise ShapeError(f"concat: ранг адаптера {pruned.rank}, ожидался {group.base_rank}.")
        merged = []
        for own, new in zip(group.layers, pruned.layers):
            if own.delta_shape != new.delta_shape:
                raise ShapeError(f"concat: формы слоя {own.delta_shape} и {new.delta_shape} различаются.")
            merged.append(LayerAdapter(np.hstack([own.B, new.B]), np.vstack([own.A, new.A])))
        group.layers = merged

    update_group_alpha(group, pruned.alpha)
    group.member_task_ids.append(pruned.task_id)
    return group


def ham_consolidate(adapter: TaskAdapter, registry: GroupRegistry, keep_fraction: float) -> ConsolidationResult:
    check_keep_fraction(keep_fraction)
    decision = assign_group(adapter, registry)
    if decision.creates_group:
        group = registry.new_group(base_rank=adapter.rank)
    else:
        group = registry.get(decision.group_id)

    pruned = prune(adapter, keep_fraction)
    concat_into_group(group, pruned)

    logger.info(
        "Задача %s -> группа %s (%s), сходства=%s, ранг группы=%d, alpha_g=%.6f",
        adapter.task_id,
        group.group_id,
        decision.action,
        [round(s, 4) for s in decision.similarities],
        group.rank,
        group.alpha_g,
    )
    return ConsolidationResult(decision=decision, group_id=group.group_id, pruned=pruned)
