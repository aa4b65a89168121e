"""
Детерминированная случайность.

Используется счётчиковый генератор Philox: одинаковый seed даёт одинаковый
поток на любой платформе. Независимые потоки (инициализация головы, адаптер
задачи, перемешивание батчей) выводятся из seed и строкового ключа, поэтому
порядок обращений к одному потоку не влияет на другие.
"""

from __future__ import annotations

import zlib

import numpy as np

from .exceptions import ConfigError

SEED_MAX = 2**64 - 1


def _key_words(keys) -> list[int]:
    words = []
    for key in keys:
        if isinstance(key, (int, np.integer)):
            words.append(int(key) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(key).encode("utf-8")))
    return words


def make_rng(seed: int, *keys) -> np.random.Generator:
    """Генератор Philox для (seed, *keys). Владелец один: не делите его между потребителями."""
    seed = int(seed)
    if seed < 0 or seed > SEED_MAX:
        raise ConfigError(f"seed должен быть 64-битным беззнаковым, получено {seed}.")
    entropy = [seed & 0xFFFFFFFF, seed >> 32, *_key_words(keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
