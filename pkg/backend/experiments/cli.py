"""Перевод исключений библиотеки в коды выхода management-команд."""

from django.core.management.base import CommandError

from core.exceptions import (
    ConfigError,
    DegenerateInputError,
    FormatError,
    HamError,
    InputError,
    ShapeError,
    TrainingError,
)

EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_TRAINING = 3


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (TrainingError, DegenerateInputError)):
        return EXIT_TRAINING
    if isinstance(exc, (ConfigError, InputError, FormatError, ShapeError)):
        return EXIT_USAGE
    return EXIT_FAILURE


def command_error(exc: HamError) -> CommandError:
    return CommandError(f"{type(exc).__name__}: {exc}", returncode=exit_code(exc))
