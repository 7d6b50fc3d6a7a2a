"""Trainable parameters, Adam, and soft target updates."""
from __future__ import annotations

from typing import Dict, Iterable

import numpy as np

from ..errors import ConfigurationError, DimensionError
from .autodiff import Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Parameter:
    """A float64 array with its gradient and Adam state.

    `tensor()` mints a fresh leaf for the current tape; backward passes
    accumulate into `grad` until `zero_grads` resets it.
    """

    def __init__(self, value: np.ndarray):
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.steps = 0

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def tensor(self) -> Tensor:
        def accum(g: np.ndarray) -> None:
            self.grad += g

        return Tensor(self.value, accum=accum)

    def frozen(self) -> Tensor:
        """A constant leaf: gradients stop here (used for target networks)."""
        return Tensor(self.value)


ParamDict = Dict[str, Parameter]


def init_weight(rng: np.random.Generator, fan_out: int, fan_in: int) -> Parameter:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weight matrix."""
    if fan_in <= 0 or fan_out <= 0:
        raise DimensionError("init_weight fan sizes must be positive")
    bound = 1.0 / np.sqrt(fan_in)
    return Parameter(rng.uniform(-bound, bound, size=(fan_out, fan_in)))


def init_bias(size: int) -> Parameter:
    return Parameter(np.zeros(size))


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad[...] = 0.0


def adam_step(params: Iterable[Parameter], lr: float) -> None:
    """One Adam update per parameter from its accumulated gradient.

    Uses bias-corrected moments; a zero gradient on a fresh parameter leaves
    its value untouched.
    """
    if lr <= 0:
        raise ConfigurationError(f"learning rate must be positive, got {lr}")
    for p in params:
        p.steps += 1
        p.m = ADAM_BETA1 * p.m + (1.0 - ADAM_BETA1) * p.grad
        p.v = ADAM_BETA2 * p.v + (1.0 - ADAM_BETA2) * p.grad * p.grad
        m_hat = p.m / (1.0 - ADAM_BETA1 ** p.steps)
        v_hat = p.v / (1.0 - ADAM_BETA2 ** p.steps)
        p.value -= lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


def soft_update(target: ParamDict, online: ParamDict, rate: float) -> None:
    """target <- rate * online + (1 - rate) * target, elementwise."""
    if not 0.0 <= rate <= 1.0:
        raise ConfigurationError(f"soft update rate must be in [0, 1], got {rate}")
    if set(target) != set(online):
        raise ConfigurationError("target/online parameter sets do not match")
    for name, tp in target.items():
        op = online[name]
        if tp.value.shape != op.value.shape:
            raise DimensionError(f"shape mismatch for {name}")
        tp.value = rate * op.value + (1.0 - rate) * tp.value
