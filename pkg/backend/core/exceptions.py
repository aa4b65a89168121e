"""
Ошибки движка HAM.

Библиотечный код бросает только эти исключения; перевод в коды выхода
делают management-команды (см. experiments/management/commands).
"""

from __future__ import annotations


class HamError(Exception):
    """Базовая ошибка движка."""


class ShapeError(HamError, ValueError):
    """Несовместимые размерности матриц или адаптеров."""


class DegenerateInputError(HamError, ValueError):
    """Вырожденный вход: например, вектор нулевой нормы в косинусной близости."""


class ConfigError(HamError, ValueError):
    """Значение параметра вне допустимого диапазона."""


class InputError(HamError, ValueError):
    """Некорректные входные данные (пустой датасет, неизвестный класс)."""


class StateError(HamError, RuntimeError):
    """Операция невозможна в текущем состоянии (нет групп, неполная матрица точностей)."""


class TrainingError(HamError, RuntimeError):
    """Обучение разошлось (NaN/Inf в функции потерь)."""


class FormatError(HamError, ValueError):
    """Повреждённый или обрезанный файл адаптера."""
