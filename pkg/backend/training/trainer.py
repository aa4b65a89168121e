"""
Обучение адаптера задачи.

Обучаемые параметры: B и A текущего адаптера, его alpha, alpha_g всех групп
и строки головы для классов текущей задачи. Матрицы групп и W0 заморожены.
Функция потерь — средняя кросс-энтропия, softmax только по классам текущей
задачи (остальные логиты считаются равными -inf).

Новые строки головы по умолчанию ставятся в средние признаки своих классов
(head_init = prototype). Маскированный softmax даёт строкам задачи градиенты
с нулевой суммой, поэтому сумма строк и сумма смещений задачи при обучении
не меняются и логиты разных задач остаются сравнимыми.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from adapters.lora import GroupRegistry, TaskAdapter, init_task_adapter
from core.exceptions import ConfigError, InputError, ShapeError, TrainingError
from core.rng import make_rng

from .backbone import ForwardContext, FrozenBackbone
from .optim import OptimizerState, adamw_step

logger = logging.getLogger(__name__)

DEFAULT_EPOCHS = 20
DEFAULT_BATCH_SIZE = 64
DEFAULT_LR = 1e-3

HEAD_INIT_PROTOTYPE = "prototype"
HEAD_INIT_RANDOM = "random"
HEAD_INITS = (HEAD_INIT_PROTOTYPE, HEAD_INIT_RANDOM)


class TrainableDataset(Protocol):
    task_id: int
    class_ids: Sequence[int]
    x_train: np.ndarray
    y_train: np.ndarray


class TrainSettings(Protocol):
    rank: int
    lr: float
    batch_size: int
    epochs: int
    weight_decay: float
    beta1: float
    beta2: float
    eps: float
    seed: int
    train_group_alphas: bool
    head_init: str


@dataclass
class Gradients:
    layers: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)
    alpha: float | None = None
    group_alphas: list[float] = field(default_factory=list)
    head_weight: np.ndarray | None = None
    head_bias: np.ndarray | None = None


@dataclass
class TrainReport:
    final_loss: float
    loss_trace: list[float]
    adapter: TaskAdapter
    group_alphas: list[float]


def _class_positions(num_classes: int, active_classes: Sequence[int] | None) -> np.ndarray:
    """Позиция класса среди активных логитов или -1 для замаскированных."""
    positions = np.full(num_classes, -1, dtype=np.int64)
    if active_classes is None:
        positions[:] = np.arange(num_classes)
        return positions
    active = np.asarray(sorted(set(int(c) for c in active_classes)), dtype=np.int64)
    if active.size and (active.min() < 0 or active.max() >= num_classes):
        raise InputError(f"Активные классы {active.tolist()} вне головы из {num_classes} классов.")
    positions[active] = np.arange(active.size)
    return positions


def loss_and_gradients(
    batch: tuple[np.ndarray, np.ndarray],
    ctx: ForwardContext,
    backbone: FrozenBackbone,
    active_classes: Sequence[int] | None = None,
) -> tuple[float, Gradients]:
    x, y = batch
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if y.size == 0:
        raise InputError("Пустой батч.")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] != y.size:
        raise ShapeError(f"В батче {x.shape[0]} входов и {y.size} меток.")

    num_classes = backbone.num_classes_seen
    if y.min() < 0 or y.max() >= num_classes:
        raise InputError(f"Метки вне диапазона головы (0..{num_classes - 1}).")
    positions = _class_positions(num_classes, active_classes)
    active = np.flatnonzero(positions >= 0)
    targets = positions[y]
    if np.any(targets < 0):
        raise InputError("В батче есть метки замаскированных классов.")

    logits, cache = backbone.forward_train(x, ctx)
    n = y.size
    z = logits[:, active]
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    loss = -float(log_probs[np.arange(n), targets].mean())

    # p_t - 1 считается как минус сумма остальных вероятностей: при p_t ~ 1 нет
    # сокращения, и для двух классов градиенты строк задачи точно противоположны.
    dz = np.exp(log_probs)
    dz[np.arange(n), targets] = 0.0
    dz[np.arange(n), targets] = -dz.sum(axis=1)
    dz /= n
    dlogits = np.zeros_like(logits)
    dlogits[:, active] = dz

    grads = Gradients(
        head_weight=dlogits.T @ cache.features,
        head_bias=dlogits.sum(axis=0),
    )
    groups = list(ctx.groups)
    group_alpha_grads = [0.0] * len(groups)
    current = ctx.current
    alpha_grad = 0.0
    layer_grads: list[tuple[np.ndarray, np.ndarray]] = []

    dh = dlogits @ backbone.head_weight
    weights = backbone.weights
    for idx in reversed(range(len(cache.layers))):
        layer_cache = cache.layers[idx]
        dpre = dh * (layer_cache.pre > 0.0)

        for j, out in enumerate(layer_cache.group_out):
            group_alpha_grads[j] += float(np.sum(dpre * out))

        dx = dpre @ weights[idx]
        for j, group in enumerate(groups):
            adapter_layer = group.layers[idx]
            dx += group.alpha_g * ((dpre @ adapter_layer.B) @ adapter_layer.A)

        if current is not None:
            adapter_layer = current.layers[idx]
            alpha_grad += float(np.sum(dpre * layer_cache.current_out))
            dB = current.alpha * (dpre.T @ layer_cache.current_proj)
            dproj = current.alpha * (dpre @ adapter_layer.B)
            dA = dproj.T @ layer_cache.inputs
            dx += dproj @ adapter_layer.A
            layer_grads.append((dB, dA))
        dh = dx

    layer_grads.reverse()
    grads.layers = layer_grads
    if current is not None and ctx.current_alpha_trainable:
        grads.alpha = alpha_grad
    if ctx.group_alphas_trainable:
        grads.group_alphas = group_alpha_grads
    return loss, grads


def _task_loss(dataset: TrainableDataset, ctx: ForwardContext, backbone: FrozenBackbone) -> float:
    loss, _ = loss_and_gradients((dataset.x_train, dataset.y_train), ctx, backbone, dataset.class_ids)
    return loss


def _imprint_prototypes(
    x: np.ndarray, y: np.ndarray, class_ids: Sequence[int], ctx: ForwardContext, backbone: FrozenBackbone
) -> None:
    """Средние признаки классов в контексте обучения; классы без примеров остаются со случайной строкой."""
    present = [c for c in class_ids if np.any(y == c)]
    if not present:
        return
    _, cache = backbone.forward_train(x, ctx)
    prototypes = np.stack([cache.features[y == c].mean(axis=0) for c in present])
    backbone.imprint_rows(present, prototypes)
    logger.debug("Строки головы %s заданы средними признаками.", present)


def train_task(
    dataset: TrainableDataset,
    backbone: FrozenBackbone,
    registry: GroupRegistry | None,
    cfg: TrainSettings,
    adapter: TaskAdapter | None = None,
    train_alpha: bool = True,
) -> TrainReport:
    """
    Обучает адаптер задачи. Если adapter передан, обучение продолжается с него
    (так работает наивное последовательное дообучение), иначе создаётся новый.
    """
    y = np.asarray(dataset.y_train, dtype=np.int64)
    x = np.asarray(dataset.x_train, dtype=np.float64)
    if y.size == 0:
        raise InputError(f"Задача {dataset.task_id}: пустой обучающий набор.")
    class_ids = sorted(int(c) for c in dataset.class_ids)
    first_new_row = backbone.num_classes_seen
    backbone.ensure_classes(max(class_ids) + 1)
    head_init = cfg.head_init
    if head_init not in HEAD_INITS:
        raise ConfigError(f"Неизвестный head_init: {head_init}.")

    if adapter is None:
        adapter = init_task_adapter(
            dataset.task_id, backbone.layer_shapes, cfg.rank, make_rng(cfg.seed, "adapter", dataset.task_id)
        )
    groups = list(registry.groups) if registry is not None else []
    ctx = ForwardContext(
        groups=groups,
        current=adapter,
        group_alphas_trainable=bool(cfg.train_group_alphas and groups),
        current_alpha_trainable=train_alpha,
    )
    if head_init == HEAD_INIT_PROTOTYPE:
        fresh = [c for c in class_ids if c >= first_new_row]
        _imprint_prototypes(x, y, fresh, ctx, backbone)

    params: dict[str, np.ndarray] = {}
    for i, layer in enumerate(adapter.layers):
        params[f"B.{i}"] = layer.B
        params[f"A.{i}"] = layer.A
    if train_alpha:
        params["alpha"] = np.array([adapter.alpha], dtype=np.float64)
    if ctx.group_alphas_trainable:
        for j, group in enumerate(groups):
            params[f"group_alpha.{j}"] = np.array([group.alpha_g], dtype=np.float64)
    params["head.weight"] = backbone.head_weight
    params["head.bias"] = backbone.head_bias

    state = OptimizerState(
        lr=cfg.lr,
        weight_decay=cfg.weight_decay,
        beta1=cfg.beta1,
        beta2=cfg.beta2,
        eps=cfg.eps,
        decay_names=frozenset(name for name in params if name[:2] in ("B.", "A.")),
    )
    rng = make_rng(cfg.seed, "batches", dataset.task_id)
    n = y.size
    batch_size = max(1, int(cfg.batch_size))
    trace: list[float] = []

    for epoch in range(int(cfg.epochs)):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = loss_and_gradients((x[idx], y[idx]), ctx, backbone, class_ids)
            if not np.isfinite(loss):
                raise TrainingError(f"Задача {dataset.task_id}, эпоха {epoch + 1}: функция потерь = {loss}.")
            total += loss * idx.size

            grad_map: dict[str, np.ndarray] = {}
            for i, (dB, dA) in enumerate(grads.layers):
                grad_map[f"B.{i}"] = dB
                grad_map[f"A.{i}"] = dA
            if train_alpha:
                grad_map["alpha"] = np.array([grads.alpha])
            for j, value in enumerate(grads.group_alphas):
                grad_map[f"group_alpha.{j}"] = np.array([value])
            grad_map["head.weight"] = grads.head_weight
            grad_map["head.bias"] = grads.head_bias
            adamw_step(state, params, grad_map)

            if train_alpha:
                adapter.alpha = float(params["alpha"][0])
            if ctx.group_alphas_trainable:
                for j, group in enumerate(groups):
                    group.alpha_g = float(params[f"group_alpha.{j}"][0])

        epoch_loss = total / n
        trace.append(epoch_loss)
        logger.info("Задача %s, эпоха %d/%d: loss=%.6f", dataset.task_id, epoch + 1, cfg.epochs, epoch_loss)

    final_loss = _task_loss(dataset, ctx, backbone)
    if not np.isfinite(final_loss):
        raise TrainingError(f"Задача {dataset.task_id}: итоговая функция потерь = {final_loss}.")
    return TrainReport(
        final_loss=final_loss,
        loss_trace=trace,
        adapter=adapter,
        group_alphas=[float(g.alpha_g) for g in groups],
    )
