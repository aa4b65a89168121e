"""
Замороженная сеть W0 и два режима прямого прохода.

Архитектура: D -> H -> H, ReLU после каждого скрытого слоя, линейная голова
H -> C. Адаптеры подключаются ко всем скрытым слоям, голова не адаптируется.
Веса скрытых слоёв после построения не меняются; голова растёт по мере
появления классов и обучается только на строках текущей задачи.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from adapters.lora import AdapterGroup, GroupRegistry, LayerAdapter, TaskAdapter
from core.exceptions import ConfigError, ShapeError
from core.rng import make_rng

DEFAULT_INPUT_DIM = 32
DEFAULT_HIDDEN_DIM = 64
NUM_HIDDEN_LAYERS = 2


def relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


@dataclass
class ForwardContext:
    """Что участвует в прямом проходе при обучении: замороженные группы и текущий адаптер."""

    groups: Sequence[AdapterGroup] = ()
    current: TaskAdapter | None = None
    group_alphas_trainable: bool = True
    current_alpha_trainable: bool = True

    @classmethod
    def from_registry(cls, registry: GroupRegistry | None, current: TaskAdapter | None = None, **kwargs):
        groups = list(registry.groups) if registry is not None else []
        return cls(groups=groups, current=current, **kwargs)


@dataclass
class LayerCache:
    inputs: np.ndarray
    pre: np.ndarray
    current_proj: np.ndarray | None = None
    current_out: np.ndarray | None = None
    group_proj: list[np.ndarray] = field(default_factory=list)
    group_out: list[np.ndarray] = field(default_factory=list)


@dataclass
class ForwardCache:
    layers: list[LayerCache]
    features: np.ndarray
    logits: np.ndarray


def _check_layer(adapter_layer: LayerAdapter, weight: np.ndarray, where: str) -> None:
    if adapter_layer.delta_shape != weight.shape:
        raise ShapeError(f"{where}: форма дельты {adapter_layer.delta_shape}, у слоя {weight.shape}.")


class FrozenBackbone:
    def __init__(
        self,
        weights: Sequence[np.ndarray],
        biases: Sequence[np.ndarray],
        head_weight: np.ndarray,
        head_bias: np.ndarray,
        seed: int = 0,
    ):
        if len(weights) != len(biases) or not weights:
            raise ShapeError("Нужно хотя бы по одному весу и смещению на слой.")
        self._weights = [np.array(w, dtype=np.float64) for w in weights]
        self._biases = [np.array(b, dtype=np.float64).reshape(-1) for b in biases]
        for i, (w, b) in enumerate(zip(self._weights, self._biases)):
            if w.ndim != 2 or b.shape[0] != w.shape[0]:
                raise ShapeError(f"Слой {i}: W {w.shape}, bias {b.shape}.")
            if i and w.shape[1] != self._weights[i - 1].shape[0]:
                raise ShapeError(f"Слой {i}: вход {w.shape[1]} не совпадает с выходом предыдущего слоя.")
        for arr in (*self._weights, *self._biases):
            arr.setflags(write=False)
        self.head_weight = np.array(head_weight, dtype=np.float64).reshape(-1, self.feature_dim)
        self.head_bias = np.array(head_bias, dtype=np.float64).reshape(-1)
        self.seed = int(seed)

    @classmethod
    def build(
        cls,
        input_dim: int = DEFAULT_INPUT_DIM,
        hidden_dim: int = DEFAULT_HIDDEN_DIM,
        seed: int = 0,
        num_hidden: int = NUM_HIDDEN_LAYERS,
    ) -> "FrozenBackbone":
        """He-инициализация скрытых слоёв из seed; голова пустая."""
        if input_dim < 1 or hidden_dim < 1 or num_hidden < 1:
            raise ConfigError("Размерности сети должны быть положительными.")
        rng = make_rng(seed, "backbone")
        weights, biases = [], []
        fan_in = input_dim
        for _ in range(num_hidden):
            weights.append(rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(hidden_dim, fan_in)))
            biases.append(np.zeros(hidden_dim))
            fan_in = hidden_dim
        return cls(weights, biases, np.zeros((0, hidden_dim)), np.zeros(0), seed=seed)

    # ---- Свойства ----
    @property
    def weights(self) -> list[np.ndarray]:
        return list(self._weights)

    @property
    def biases(self) -> list[np.ndarray]:
        return list(self._biases)

    @property
    def input_dim(self) -> int:
        return self._weights[0].shape[1]

    @property
    def feature_dim(self) -> int:
        return self._weights[-1].shape[0]

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self._weights]

    @property
    def num_classes_seen(self) -> int:
        return self.head_weight.shape[0]

    def checksum(self) -> str:
        """sha256 по всем W0 и смещениям скрытых слоёв (голова не входит)."""
        digest = hashlib.sha256()
        for arr in (*self._weights, *self._biases):
            digest.update(np.ascontiguousarray(arr).tobytes())
        return digest.hexdigest()

    def snapshot(self) -> "FrozenBackbone":
        """Копия с текущей головой; дальнейшее обучение исходной сети её не меняет."""
        return FrozenBackbone(self._weights, self._biases, self.head_weight.copy(), self.head_bias.copy(), self.seed)

    # ---- Голова ----
    def expand_head(self, new_classes: int) -> None:
        """
        Добавляет new_classes строк головы. Строки инициализируются из потока,
        зависящего только от seed и номера первой новой строки, старые строки не трогаются.
        """
        if new_classes < 1:
            raise ConfigError(f"new_classes должен быть >= 1, получено {new_classes}.")
        rng = make_rng(self.seed, "head", self.num_classes_seen)
        rows = rng.normal(0.0, 1.0 / np.sqrt(self.feature_dim), size=(new_classes, self.feature_dim))
        self.head_weight = np.vstack([self.head_weight, rows])
        self.head_bias = np.concatenate([self.head_bias, np.zeros(new_classes)])

    def ensure_classes(self, num_classes: int) -> int:
        """Расширяет голову до num_classes; возвращает число добавленных строк."""
        missing = int(num_classes) - self.num_classes_seen
        if missing > 0:
            self.expand_head(missing)
            return missing
        return 0

    def imprint_rows(self, class_ids: Sequence[int], prototypes: np.ndarray) -> None:
        """
        Строка класса c становится его средним признаком mu_c, смещение равно -|mu_c|^2 / 2.
        Логит тогда равен -|f - mu_c|^2 / 2 с точностью до общего для всех классов слагаемого,
        то есть голова на этих строках работает как классификатор ближайшего среднего.
        """
        prototypes = np.atleast_2d(np.asarray(prototypes, dtype=np.float64))
        rows = np.asarray(list(class_ids), dtype=np.int64)
        if prototypes.shape != (rows.size, self.feature_dim):
            raise ShapeError(f"Прототипы {prototypes.shape}, ожидалось ({rows.size}, {self.feature_dim}).")
        if rows.size and (rows.min() < 0 or rows.max() >= self.num_classes_seen):
            raise ShapeError(f"Классы {rows.tolist()} вне головы из {self.num_classes_seen} строк.")
        self.head_weight[rows] = prototypes
        self.head_bias[rows] = -0.5 * np.sum(prototypes * prototypes, axis=1)

    def head(self, features: np.ndarray) -> np.ndarray:
        return features @ self.head_weight.T + self.head_bias

    # ---- Прямые проходы ----
    def _prepare_input(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeError(f"Ожидался вход размерности {self.input_dim}, получено {x.shape}.")
        return x, single

    def forward_train(self, x, ctx: ForwardContext) -> tuple[np.ndarray, ForwardCache]:
        """
        h = W0 x + sum_j alpha_Gj B_Gj (A_Gj x) + alpha_i B_i (A_i x) + b, затем ReLU.

        Дельты не материализуются: сначала проекция A x, затем B.
        """
        h, single = self._prepare_input(x)
        current = ctx.current
        if current is not None and len(current.layers) != len(self._weights):
            raise ShapeError(f"У адаптера {len(current.layers)} слоёв, у сети {len(self._weights)}.")
        for group in ctx.groups:
            if len(group.layers) != len(self._weights):
                raise ShapeError(f"У группы {group.group_id} {len(group.layers)} слоёв, у сети {len(self._weights)}.")

        caches = []
        for idx, (w, b) in enumerate(zip(self._weights, self._biases)):
            cache = LayerCache(inputs=h, pre=h @ w.T + b)
            for group in ctx.groups:
                layer = group.layers[idx]
                _check_layer(layer, w, f"группа {group.group_id}, слой {idx}")
                proj = h @ layer.A.T
                out = proj @ layer.B.T
                cache.group_proj.append(proj)
                cache.group_out.append(out)
                cache.pre = cache.pre + group.alpha_g * out
            if current is not None:
                layer = current.layers[idx]
                _check_layer(layer, w, f"адаптер задачи {current.task_id}, слой {idx}")
                cache.current_proj = h @ layer.A.T
                cache.current_out = cache.current_proj @ layer.B.T
                cache.pre = cache.pre + current.alpha * cache.current_out
            caches.append(cache)
            h = relu(cache.pre)

        logits = self.head(h)
        cache = ForwardCache(layers=caches, features=h, logits=logits)
        return (logits[0] if single else logits), cache

    def forward_final(self, x, merged) -> np.ndarray:
        """Обычный проход с W0 + dW_merged в каждом слое; merged — список дельт или MergedDelta."""
        deltas = list(getattr(merged, "deltas", merged))
        if len(deltas) != len(self._weights):
            raise ShapeError(f"Дельт {len(deltas)}, слоёв {len(self._weights)}.")
        h, single = self._prepare_input(x)
        for idx, (w, b, delta) in enumerate(zip(self._weights, self._biases, deltas)):
            delta = np.asarray(delta, dtype=np.float64)
            if delta.shape != w.shape:
                raise ShapeError(f"Слой {idx}: дельта {delta.shape}, вес {w.shape}.")
            h = relu(h @ (w + delta).T + b)
        logits = self.head(h)
        return logits[0] if single else logits

    def forward_plain(self, x) -> np.ndarray:
        return self.forward_final(x, [np.zeros_like(w) for w in self._weights])
