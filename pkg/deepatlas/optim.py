# Copyright 2022-2026 deepatlas-desk authors.
# Use of this source code is governed by the Apache 2.0 license that can be found
# in the LICENSE file.


"""Adam optimizer and learning-rate schedule"""

from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from .nets import NetParams

BETA1 = 0.9
BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class AdamState:
    """First and second moment estimates per tensor name"""
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = BETA1, beta2: float = BETA2,
              eps: float = ADAM_EPS) -> None:
    """In-place bias-corrected Adam update; missing grads count as zero"""
    if lr <= 0:
        raise ValueError(f'Learning rate must be positive, got {lr}')

    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step

    for name, value in params.items():
        grad = grads.get(name)

        if grad is None:
            grad = np.zeros_like(value)

        m = state.m.get(name, np.zeros_like(value))
        v = state.v.get(name, np.zeros_like(value))
        m = beta1 * m + (1.0 - beta1) * grad
        v = beta2 * v + (1.0 - beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        value -= lr * (m / correction1) / (np.sqrt(v / correction2) + eps)


class Adam:
    """Adam bound to a network's tensors"""

    def __init__(self, params: NetParams, lr: float) -> None:
        self.params = params
        self.lr = lr
        self.state = AdamState()

    def step(self) -> None:
        """Applies accumulated gradients and clears them"""
        values = {name: t.data for name, t in self.params.tensors.items()}
        grads = {name: t.grad for name, t in self.params.tensors.items() if t.grad is not None}
        adam_step(values, grads, self.state, self.lr)

        for tensor in self.params.tensors.values():
            tensor.zero_grad()


def decayed_lr(base_lr: float, decay: float, decay_epochs: Sequence[int], epoch: int) -> float:
    """Multiplies base rate by decay once for every milestone epoch already reached"""
    if not 0 < decay <= 1:
        raise ValueError(f'Learning-rate decay must be in (0, 1], got {decay}')

    passed = sum(1 for milestone in decay_epochs if epoch >= milestone)
    return base_lr * decay ** passed
