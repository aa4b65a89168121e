"""
Сквозной прогон эксперимента.

Стратегии:
    ham             — обучение адаптера, группировка, обрезка, конкатенация;
                      после каждой задачи — слияние групп и оценка.
    naive_ft        — один адаптер дообучается последовательно на всех задачах.
    per_task_merge  — отдельный адаптер на задачу, без групп; после каждой
                      задачи все обученные адаптеры сливаются базовым алгоритмом.

Результаты в каталоге запуска: accuracy_matrix.csv, summary.json,
merged_adapter.hama, run.log и, по флагу save_groups, groups/group_<id>.hama.
"""

from __future__ import annotations

import json
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

from django.conf import settings
from django.db import DatabaseError

from adapters.ham import ham_consolidate
from adapters.lora import (
    GroupRegistry,
    LayerAdapter,
    TaskAdapter,
    dense_parameter_count,
    nonzero_parameter_count,
)
from adapters.storage import save_adapter
from core.exceptions import StateError
from core.files import atomic_write_text
from merging.merge_service import MERGE_HAM, MergedDelta, finalize, merge_ham, merge_layerwise
from training.backbone import FrozenBackbone
from training.trainer import train_task

from .config import ExperimentConfig
from .metrics import AccuracyMatrix, average_accuracy, forgetting_measure
from .models import ExperimentRun
from .serializers import STRATEGY_HAM, STRATEGY_NAIVE_FT, STRATEGY_PER_TASK_MERGE
from .streams import TaskDataset, evaluate, generate_stream

logger = logging.getLogger(__name__)

ACCURACY_FILE = "accuracy_matrix.csv"
SUMMARY_FILE = "summary.json"
MERGED_ADAPTER_FILE = "merged_adapter.hama"
LOG_FILE = "run.log"
GROUPS_DIR = "groups"


@dataclass
class RunResult:
    output_dir: Path
    accuracy: AccuracyMatrix
    average_accuracy: float
    forgetting: float | None
    merged: MergedDelta
    registry: GroupRegistry | None
    summary: dict = field(default_factory=dict)

    @property
    def nonzero_parameters(self) -> int:
        return int(self.summary["parameters"]["nonzero"])


@contextmanager
def _run_log(path: Path):
    """Дублирует логи приложений в run.log каталога запуска."""
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="w", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    loggers = [logging.getLogger(name) for name in settings.HAM_LOGGERS]
    for item in loggers:
        item.addHandler(handler)
    try:
        yield
    finally:
        for item in loggers:
            item.removeHandler(handler)
        handler.close()


def _scaled(adapter: TaskAdapter) -> MergedDelta:
    """Одиночный адаптер задачи как слитая дельта: alpha * B @ A."""
    factors = [LayerAdapter(adapter.alpha * layer.B, layer.A.copy()) for layer in adapter.layers]
    return MergedDelta(
        deltas=[adapter.alpha * delta for delta in adapter.deltas()],
        provenance=[{"task_id": adapter.task_id, "alpha": float(adapter.alpha)}],
        algorithm=STRATEGY_NAIVE_FT,
        factors=factors,
    )


class ExperimentRunner:
    def __init__(self, config: ExperimentConfig, output_dir: str | Path):
        self.config = config
        self.output_dir = Path(output_dir)
        self.stream: list[TaskDataset] = []
        self.backbone: FrozenBackbone | None = None
        self.registry: GroupRegistry | None = None
        self.task_adapters: list[TaskAdapter] = []
        self.shared_adapter: TaskAdapter | None = None
        self.final_losses: dict[int, float] = {}
        self.adapter_accuracy: dict[int, float] = {}
        self.dense_parameters = 0

    # ---- Слияние по стратегии ----
    def _merge_groups(self) -> MergedDelta:
        cfg = self.config
        if cfg.merge_algorithm == MERGE_HAM:
            return merge_ham(self.registry)
        groups = [g for g in self.registry.groups if g.member_count > 0]
        return merge_layerwise(
            [[g.alpha_g * delta for delta in g.deltas()] for g in groups],
            cfg.merge_algorithm,
            trim_fraction=cfg.ties_trim_fraction,
            lam=cfg.ties_lambda,
            drop_prob=cfg.dare_drop_prob,
            seed=cfg.seed,
            provenance=[{"group_id": g.group_id, "alpha": float(g.alpha_g)} for g in groups],
        )

    def _merge_task_adapters(self) -> MergedDelta:
        cfg = self.config
        return merge_layerwise(
            [adapter.deltas() for adapter in self.task_adapters],
            cfg.merge_algorithm,
            trim_fraction=cfg.ties_trim_fraction,
            lam=cfg.ties_lambda,
            drop_prob=cfg.dare_drop_prob,
            seed=cfg.seed,
            provenance=[{"task_id": a.task_id} for a in self.task_adapters],
        )

    # ---- Шаги стратегий ----
    def _step_ham(self, dataset: TaskDataset) -> MergedDelta:
        report = train_task(dataset, self.backbone, self.registry, self.config)
        self.final_losses[dataset.task_id] = report.final_loss
        self.dense_parameters += dense_parameter_count(report.adapter)
        solo = finalize(self.backbone, _scaled(report.adapter))
        self.adapter_accuracy[dataset.task_id] = evaluate(solo, [dataset])[0]
        ham_consolidate(report.adapter, self.registry, self.config.keep_fraction)
        return self._merge_groups()

    def _step_naive(self, dataset: TaskDataset) -> MergedDelta:
        report = train_task(dataset, self.backbone, None, self.config, adapter=self.shared_adapter)
        self.shared_adapter = report.adapter
        self.final_losses[dataset.task_id] = report.final_loss
        return _scaled(report.adapter)

    def _step_per_task(self, dataset: TaskDataset) -> MergedDelta:
        report = train_task(dataset, self.backbone, None, self.config, train_alpha=False)
        self.task_adapters.append(report.adapter)
        self.final_losses[dataset.task_id] = report.final_loss
        self.dense_parameters += dense_parameter_count(report.adapter)
        return self._merge_task_adapters()

    # ---- Основной цикл ----
    def run(self) -> RunResult:
        cfg = self.config
        self.stream = generate_stream(cfg.stream_spec())
        self.backbone = FrozenBackbone.build(cfg.input_dim, cfg.hidden_dim, seed=cfg.seed)
        checksum = self.backbone.checksum()
        if cfg.strategy == STRATEGY_HAM:
            self.registry = GroupRegistry(cfg.g_max, cfg.tau_sim, cfg.grouping_rule, cfg.similarity_scope)

        step = {
            STRATEGY_HAM: self._step_ham,
            STRATEGY_NAIVE_FT: self._step_naive,
            STRATEGY_PER_TASK_MERGE: self._step_per_task,
        }[cfg.strategy]

        matrix = AccuracyMatrix(cfg.num_tasks)
        merged = None
        for t, dataset in enumerate(self.stream, start=1):
            merged = step(dataset)
            row = evaluate(finalize(self.backbone, merged), self.stream[:t])
            matrix.record_row(t, row)
            logger.info("После задачи %d: %s", t, " ".join(f"{acc:.4f}" for acc in row))

        if self.backbone.checksum() != checksum:
            raise StateError("Веса W0 изменились во время обучения.")

        aa = average_accuracy(matrix)
        fm = forgetting_measure(matrix) if cfg.num_tasks >= 2 else None
        summary = self._summary(merged, aa, fm)
        self._write_outputs(matrix, merged, summary)
        logger.info("Готово: AA=%.4f FM=%s, каталог %s", aa, "n/a" if fm is None else f"{fm:.4f}", self.output_dir)
        return RunResult(self.output_dir, matrix, aa, fm, merged, self.registry, summary)

    # ---- Отчёт ----
    def _parameter_report(self, merged: MergedDelta) -> dict:
        dense = self.dense_parameters
        if self.registry is not None:
            nonzero = sum(nonzero_parameter_count(g) for g in self.registry.groups)
        elif self.task_adapters:
            nonzero = sum(nonzero_parameter_count(a) for a in self.task_adapters)
        else:
            nonzero = nonzero_parameter_count(self.shared_adapter)
            dense = dense_parameter_count(self.shared_adapter)
        return {
            "dense": int(dense),
            "nonzero": int(nonzero),
            "ratio": float(nonzero / dense) if dense else 0.0,
            "merged_rank": merged.rank,
        }

    def _group_report(self) -> list[dict]:
        report = []
        for group in self.registry.groups:
            entry = {
                "group_id": group.group_id,
                "member_count": group.member_count,
                "member_task_ids": list(group.member_task_ids),
                "rank": group.rank,
                "alpha_g": float(group.alpha_g),
            }
            # группа как промежуточная модель: W0 + alpha_g * dW_G на задачах участников
            members = [d for d in self.stream if d.task_id in set(group.member_task_ids)]
            solo = MergedDelta(deltas=[group.alpha_g * delta for delta in group.deltas()], algorithm=MERGE_HAM)
            accs = evaluate(finalize(self.backbone, solo), members)
            entry["member_accuracy"] = {str(d.task_id): acc for d, acc in zip(members, accs)}
            report.append(entry)
        return report

    def _summary(self, merged: MergedDelta, aa: float, fm: float | None) -> dict:
        cfg = self.config
        summary = {
            "strategy": cfg.strategy,
            "merge_algorithm": cfg.merge_algorithm,
            "num_tasks": cfg.num_tasks,
            "seed": cfg.seed,
            "average_accuracy": aa,
            "forgetting_measure": fm,
            "parameters": self._parameter_report(merged),
            "final_loss": {str(k): v for k, v in self.final_losses.items()},
            "backbone_checksum": self.backbone.checksum(),
            "config": cfg.to_dict(),
        }
        if self.registry is not None:
            summary["groups"] = self._group_report()
            summary["group_count"] = len(self.registry)
            summary["merged_rank"] = self.registry.merged_rank()
            summary["adapter_accuracy"] = {str(k): v for k, v in self.adapter_accuracy.items()}
        return summary

    def _write_outputs(self, matrix: AccuracyMatrix, merged: MergedDelta, summary: dict) -> None:
        out = self.output_dir
        atomic_write_text(out / ACCURACY_FILE, matrix.to_csv())
        atomic_write_text(out / SUMMARY_FILE, json.dumps(summary, indent=2, sort_keys=True, ensure_ascii=False) + "\n")
        save_adapter(out / MERGED_ADAPTER_FILE, merged)
        if self.config.save_groups and self.registry is not None:
            for group in self.registry.groups:
                save_adapter(out / GROUPS_DIR / f"group_{group.group_id}.hama", group)


# ---- Журнал запусков ----
def _ledger_start(config: ExperimentConfig, output_dir: Path, sweep_label: str):
    if not settings.HAM_RECORD_RUNS:
        return None
    try:
        return ExperimentRun.objects.create(
            strategy=config.strategy,
            merge_algorithm=config.merge_algorithm,
            config=config.to_dict(),
            output_dir=str(output_dir),
            sweep_label=sweep_label,
        )
    except DatabaseError as e:
        # таблицы нет, если не выполнен migrate
        logger.warning("Журнал запусков недоступен: %s", e)
        return None


def _ledger_call(run, method: str, *args) -> None:
    if run is None:
        return
    try:
        getattr(run, method)(*args)
    except DatabaseError as e:
        logger.warning("Не удалось обновить запись запуска %s: %s", run.pk, e)


def run_experiment(config: ExperimentConfig, output_dir: str | Path, sweep_label: str = "") -> RunResult:
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    run = _ledger_start(config, output_dir, sweep_label)
    with _run_log(output_dir / LOG_FILE):
        logger.info("Запуск: strategy=%s merge=%s seed=%s", config.strategy, config.merge_algorithm, config.seed)
        try:
            result = ExperimentRunner(config, output_dir).run()
        except Exception as e:
            logger.error("Запуск завершился ошибкой: %s", e)
            _ledger_call(run, "mark_failed", str(e))
            raise
    _ledger_call(run, "mark_completed", result.average_accuracy, result.forgetting, result.nonzero_parameters)
    return result
