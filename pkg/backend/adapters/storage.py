"""
Бинарный формат файла адаптера.

    magic      4 байта  b"HAMA"
    version    u32
    kind       u32      0 = task, 1 = group, 2 = merged
    alpha      f64
    layers     u32
    по слоям:  d, k, r (u32), затем B (d x r) и A (r x k) — f32 little-endian, row-major
    трейлер    u32 длина + JSON метаданных (utf-8, ключи отсортированы)

Все целые и вещественные — little-endian. Внутри движка значения float64,
в файле — float32.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from core.exceptions import FormatError
from core.files import atomic_write_bytes

from .lora import AdapterGroup, LayerAdapter, TaskAdapter, nonzero_parameter_count

MAGIC = b"HAMA"
FORMAT_VERSION = 1

KIND_TASK = "task"
KIND_GROUP = "group"
KIND_MERGED = "merged"
_KIND_CODES = {KIND_TASK: 0, KIND_GROUP: 1, KIND_MERGED: 2}
_KIND_NAMES = {code: name for name, code in _KIND_CODES.items()}

_HEADER = struct.Struct("<4sIIdI")
_LAYER = struct.Struct("<III")
_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")


@dataclass
class AdapterRecord:
    """Содержимое файла адаптера без привязки к конкретному типу."""

    kind: str
    alpha: float
    layers: list[LayerAdapter]
    metadata: dict = field(default_factory=dict)

    @property
    def nonzero_count(self) -> int:
        return nonzero_parameter_count(self)


def to_record(adapter) -> AdapterRecord:
    if isinstance(adapter, AdapterRecord):
        return adapter
    if isinstance(adapter, TaskAdapter):
        return AdapterRecord(KIND_TASK, float(adapter.alpha), adapter.layers, {"task_id": adapter.task_id})
    if isinstance(adapter, AdapterGroup):
        return AdapterRecord(
            KIND_GROUP,
            float(adapter.alpha_g),
            adapter.layers,
            {
                "group_id": adapter.group_id,
                "member_count": adapter.member_count,
                "member_task_ids": list(adapter.member_task_ids),
                "base_rank": adapter.base_rank,
            },
        )
    as_record = getattr(adapter, "as_record", None)
    if as_record is not None:
        return as_record()
    raise TypeError(f"Неподдерживаемый тип адаптера: {type(adapter).__name__}")


def from_record(record: AdapterRecord):
    """task -> TaskAdapter, group -> AdapterGroup, merged остаётся AdapterRecord."""
    meta = record.metadata
    if record.kind == KIND_TASK:
        return TaskAdapter(task_id=meta.get("task_id", 0), layers=record.layers, alpha=record.alpha)
    if record.kind == KIND_GROUP:
        return AdapterGroup(
            group_id=meta.get("group_id", 0),
            layers=record.layers,
            alpha_g=record.alpha,
            member_count=int(meta.get("member_count", 1)),
            member_task_ids=list(meta.get("member_task_ids", [])),
            base_rank=meta.get("base_rank"),
        )
    return record


def encode_adapter(adapter) -> bytes:
    record = to_record(adapter)
    chunks = [
        _HEADER.pack(MAGIC, FORMAT_VERSION, _KIND_CODES[record.kind], float(record.alpha), len(record.layers))
    ]
    for layer in record.layers:
        d, k, r = layer.out_features, layer.in_features, layer.rank
        chunks.append(_LAYER.pack(d, k, r))
        chunks.append(np.ascontiguousarray(layer.B, dtype=_F32).tobytes())
        chunks.append(np.ascontiguousarray(layer.A, dtype=_F32).tobytes())
    meta = json.dumps(record.metadata, sort_keys=True, ensure_ascii=True).encode("utf-8")
    chunks.append(_U32.pack(len(meta)))
    chunks.append(meta)
    return b"".join(chunks)


class _Reader:
    def __init__(self, payload: bytes):
        self.payload = payload
        self.offset = 0

    def take(self, size: int) -> bytes:
        end = self.offset + size
        if end > len(self.payload):
            raise FormatError(
                f"Файл обрезан: нужно {size} байт по смещению {self.offset}, доступно {len(self.payload) - self.offset}."
            )
        chunk = self.payload[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))

    def matrix(self, rows: int, cols: int) -> np.ndarray:
        raw = self.take(rows * cols * _F32.itemsize)
        return np.frombuffer(raw, dtype=_F32).astype(np.float64).reshape(rows, cols)


def decode_adapter(payload: bytes) -> AdapterRecord:
    reader = _Reader(payload)
    magic, version, kind_code, alpha, n_layers = reader.unpack(_HEADER)
    if magic != MAGIC:
        raise FormatError(f"Неверная сигнатура файла: {magic!r}, ожидалась {MAGIC!r}.")
    if version != FORMAT_VERSION:
        raise FormatError(f"Неподдерживаемая версия формата: {version}.")
    if kind_code not in _KIND_NAMES:
        raise FormatError(f"Неизвестный вид адаптера: {kind_code}.")

    layers = []
    for _ in range(n_layers):
        d, k, r = reader.unpack(_LAYER)
        B = reader.matrix(d, r)
        A = reader.matrix(r, k)
        layers.append(LayerAdapter(B, A))

    (meta_len,) = reader.unpack(_U32)
    try:
        metadata = json.loads(reader.take(meta_len).decode("utf-8")) if meta_len else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"Повреждён трейлер метаданных: {e}") from e
    if reader.offset != len(payload):
        raise FormatError(f"Лишние {len(payload) - reader.offset} байт в конце файла.")

    return AdapterRecord(_KIND_NAMES[kind_code], float(alpha), layers, metadata)


def save_adapter(path: str | os.PathLike, adapter) -> Path:
    return atomic_write_bytes(path, encode_adapter(adapter))


def load_adapter(path: str | os.PathLike):
    """Читает файл целиком; при любой ошибке формата возвращать нечего — бросается FormatError."""
    try:
        payload = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"Не удалось прочитать {path}: {e}") from e
    return from_record(decode_adapter(payload))
