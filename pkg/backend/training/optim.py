"""
AdamW с развязанным затуханием весов.

    p <- p * (1 - lr * wd)                  (только матрицы адаптера)
    m <- b1 * m + (1 - b1) * g
    v <- b2 * v + (1 - b2) * g^2
    p <- p - lr * m_hat / (sqrt(v_hat) + eps)

Параметры обновляются на месте.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from core.exceptions import ConfigError, ShapeError


@dataclass
class OptimizerState:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # имена параметров с затуханием; None: все параметры с ndim >= 2
    decay_names: frozenset[str] | None = None
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr >= 0.0:
            raise ConfigError(f"Недопустимый learning rate: {self.lr}")
        if not 0.0 <= self.beta1 < 1.0:
            raise ConfigError(f"Недопустимый beta1: {self.beta1}")
        if not 0.0 <= self.beta2 < 1.0:
            raise ConfigError(f"Недопустимый beta2: {self.beta2}")
        if not self.eps > 0.0:
            raise ConfigError(f"Недопустимый eps: {self.eps}")
        if not self.weight_decay >= 0.0:
            raise ConfigError(f"Недопустимый weight decay: {self.weight_decay}")

    def decays(self, name: str, param: np.ndarray) -> bool:
        if self.decay_names is None:
            return param.ndim >= 2
        return name in self.decay_names


def adamw_step(state: OptimizerState, params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    for name, param in params.items():
        if name not in grads:
            raise ShapeError(f"Нет градиента для параметра {name}.")
        if np.shape(grads[name]) != param.shape:
            raise ShapeError(f"{name}: параметр {param.shape}, градиент {np.shape(grads[name])}.")

    state.step += 1
    bias1 = 1.0 - state.beta1 ** state.step
    bias2 = 1.0 - state.beta2 ** state.step

    for name, param in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if state.weight_decay and state.decays(name, param):
            param *= 1.0 - state.lr * state.weight_decay

        m = state.exp_avg.setdefault(name, np.zeros_like(param))
        v = state.exp_avg_sq.setdefault(name, np.zeros_like(param))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad

        param -= state.lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
