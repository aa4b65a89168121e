"""
Перебор сетки параметров: по прогону на точку, каждая точка в своём
подкаталоге point_<NNN>. Сводная таблица — sweep.csv в корне sweep.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path

from core.exceptions import HamError
from core.files import atomic_write_text

from .config import ExperimentConfig
from .run_service import run_experiment

logger = logging.getLogger(__name__)

SWEEP_FILE = "sweep.csv"
RESULT_COLUMNS = (
    "status",
    "average_accuracy",
    "forgetting_measure",
    "nonzero_parameters",
    "merged_rank",
    "output_dir",
    "error",
)


@dataclass
class SweepRow:
    params: dict[str, str]
    output_dir: Path
    status: str = "ok"
    average_accuracy: float | None = None
    forgetting: float | None = None
    nonzero_parameters: int | None = None
    merged_rank: int | None = None
    error: str = ""

    @property
    def failed(self) -> bool:
        return self.status != "ok"


@dataclass
class SweepResult:
    output_dir: Path
    rows: list[SweepRow] = field(default_factory=list)

    @property
    def failures(self) -> list[SweepRow]:
        return [row for row in self.rows if row.failed]


def point_dir(root: Path, index: int) -> Path:
    return root / f"point_{index:03d}"


def _label(params: dict[str, str]) -> str:
    return ",".join(f"{k}={v}" for k, v in params.items())


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def sweep_csv(result: SweepResult) -> str:
    names = list(result.rows[0].params) if result.rows else []
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["point", *names, *RESULT_COLUMNS])
    for index, row in enumerate(result.rows):
        writer.writerow([
            index,
            *[row.params[name] for name in names],
            row.status,
            _fmt(row.average_accuracy),
            _fmt(row.forgetting),
            _fmt(row.nonzero_parameters),
            _fmt(row.merged_rank),
            row.output_dir.name,
            row.error,
        ])
    return buffer.getvalue()


def run_sweep(points: list[tuple[dict[str, str], ExperimentConfig]], output_dir: str | Path) -> SweepResult:
    """Точки выполняются последовательно; ошибка точки записывается, перебор продолжается."""
    root = Path(output_dir)
    result = SweepResult(root)
    for index, (params, config) in enumerate(points):
        target = point_dir(root, index)
        label = _label(params)
        row = SweepRow(params=params, output_dir=target)
        logger.info("Точка %d/%d: %s", index + 1, len(points), label)
        try:
            run = run_experiment(config, target, sweep_label=label)
        except HamError as e:
            logger.error("Точка %s завершилась ошибкой: %s", label, e)
            row.status = "failed"
            row.error = f"{type(e).__name__}: {e}"
        except Exception as e:
            logger.exception("Точка %s: непредвиденная ошибка", label)
            row.status = "failed"
            row.error = f"{type(e).__name__}: {e}"
        else:
            row.average_accuracy = run.average_accuracy
            row.forgetting = run.forgetting
            row.nonzero_parameters = run.nonzero_parameters
            row.merged_rank = run.summary["parameters"]["merged_rank"]
            if run.registry is not None:
                row.merged_rank = run.registry.merged_rank()
        result.rows.append(row)
        atomic_write_text(root / SWEEP_FILE, sweep_csv(result))
    return result
