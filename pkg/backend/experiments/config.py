"""
Конфиг эксперимента: файл key=value (формат .env), разбор через python-dotenv,
проверка через ExperimentConfigSerializer.
"""

from __future__ import annotations

import dataclasses
import itertools
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from django.conf import settings
from dotenv import dotenv_values

from core.exceptions import ConfigError

from .serializers import ExperimentConfigSerializer
from .streams import StreamSpec

SWEEP_PREFIX = "sweep_"
SWEEP_KEYS = (
    "keep_fraction",
    "g_max",
    "tau_sim",
    "grouping_rule",
    "merge_algorithm",
    "num_tasks",
    "strategy",
    "head_init",
    "seed",
)


@dataclass(frozen=True)
class ExperimentConfig:
    num_tasks: int = 20
    classes_per_task: int = 2
    input_dim: int = 32
    hidden_dim: int = 64
    train_per_class: int = 100
    test_per_class: int = 100
    separation: float = 6.0
    stream_mode: str = "clustered"
    super_clusters: int = 2
    cluster_spread: float = 0.5
    class_offset: float = 0.5
    rank: int = 16
    keep_fraction: float = 0.6
    g_max: int = 2
    tau_sim: float = 0.3
    grouping_rule: str = "similarity"
    similarity_scope: str = "last"
    train_group_alphas: bool = True
    head_init: str = "prototype"
    merge_algorithm: str = "ham"
    strategy: str = "ham"
    ties_trim_fraction: float = 0.2
    ties_lambda: float = 1.0
    dare_drop_prob: float = 0.5
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    output_dir: str = ""
    save_groups: bool = False

    def stream_spec(self) -> StreamSpec:
        return StreamSpec(
            num_tasks=self.num_tasks,
            classes_per_task=self.classes_per_task,
            input_dim=self.input_dim,
            train_per_class=self.train_per_class,
            test_per_class=self.test_per_class,
            separation=self.separation,
            mode=self.stream_mode,
            super_clusters=self.super_clusters,
            cluster_spread=self.cluster_spread,
            class_offset=self.class_offset,
            seed=self.seed,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return config_from_mapping({**self.to_dict(), **changes})


def _flatten_errors(errors: Mapping[str, Any]) -> str:
    parts = []
    for key, messages in errors.items():
        if isinstance(messages, Mapping):
            messages = [_flatten_errors(messages)]
        elif not isinstance(messages, (list, tuple)):
            messages = [messages]
        text = "; ".join(str(m) for m in messages)
        parts.append(text if key == "non_field_errors" else f"{key}: {text}")
    return "; ".join(parts)


def config_from_mapping(values: Mapping[str, Any]) -> ExperimentConfig:
    data = {k: v for k, v in values.items() if not (v is None or (k == "super_clusters" and v == ""))}
    serializer = ExperimentConfigSerializer(data=data)
    if not serializer.is_valid():
        raise ConfigError(f"Некорректный конфиг: {_flatten_errors(serializer.errors)}")
    return ExperimentConfig(**serializer.validated_data)


def read_config_file(path: str | os.PathLike) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"Файл конфига не найден: {path}")
    raw = dotenv_values(path)
    return {key.strip().lower(): value for key, value in raw.items()}


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    values = read_config_file(path)
    sweep_keys = sorted(k for k in values if k.startswith(SWEEP_PREFIX))
    if sweep_keys:
        raise ConfigError(f"Ключи {', '.join(sweep_keys)} допустимы только в конфиге sweep.")
    return config_from_mapping(values)


def _split_values(key: str, raw: str | None) -> list[str]:
    items = [item.strip() for item in (raw or "").split(",")]
    items = [item for item in items if item]
    if not items:
        raise ConfigError(f"Пустой список значений для {SWEEP_PREFIX}{key}.")
    return items


def load_sweep(path: str | os.PathLike) -> tuple[ExperimentConfig, list[tuple[dict[str, str], ExperimentConfig]]]:
    """
    Возвращает базовый конфиг и точки сетки (параметры, конфиг) в порядке
    SWEEP_KEYS. Все точки проверяются до начала вычислений.
    """
    values = read_config_file(path)
    grid: dict[str, list[str]] = {}
    base: dict[str, str] = {}
    for key, raw in values.items():
        if not key.startswith(SWEEP_PREFIX):
            base[key] = raw
            continue
        name = key[len(SWEEP_PREFIX):]
        if name not in SWEEP_KEYS:
            raise ConfigError(f"Параметр {name} нельзя перебирать; допустимы: {', '.join(SWEEP_KEYS)}.")
        grid[name] = _split_values(name, raw)
    if not grid:
        raise ConfigError("Пустая сетка: нет ни одного ключа sweep_*.")

    base_config = config_from_mapping(base)
    names = [name for name in SWEEP_KEYS if name in grid]
    points = []
    for combo in itertools.product(*(grid[name] for name in names)):
        params = dict(zip(names, combo))
        try:
            points.append((params, config_from_mapping({**base, **params})))
        except ConfigError as e:
            raise ConfigError(f"Точка {params}: {e}") from e
    return base_config, points


def resolve_output_dir(config: ExperimentConfig, override: str | os.PathLike | None = None) -> Path:
    """Порядок: аргумент команды, HAM_OUTPUT_DIR, output_dir конфига, каталог по умолчанию."""
    for candidate in (override, settings.HAM_OUTPUT_DIR, config.output_dir):
        if candidate:
            return Path(candidate)
    return Path(settings.HAM_DEFAULT_OUTPUT_DIR)
