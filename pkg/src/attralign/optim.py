"""Plain-numpy optimizers with serializable state.

The trainable surface of this toolkit is a handful of affine maps, so the
optimizers are implemented directly on flat name->array parameter dicts;
updates happen in place so model objects keep referencing the same arrays.
State round-trips through checkpoints for exact resume.
"""

from __future__ import annotations

import math

import numpy as np


class LrSchedule:
    def __init__(self, base_lr: float, total_steps: int, kind: str = "cosine"):
        if kind not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule '{kind}'")
        self.base_lr = base_lr
        self.total_steps = max(1, total_steps)
        self.kind = kind

    def lr(self, step: int) -> float:
        if self.kind == "constant":
            return self.base_lr
        frac = min(step, self.total_steps) / self.total_steps
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * frac))


class SgdOptimizer:
    def __init__(self, params: dict[str, np.ndarray], schedule: LrSchedule):
        self.params = params
        self.schedule = schedule
        self.step_count = 0

    def update(self, grads: dict[str, np.ndarray]) -> None:
        lr = self.schedule.lr(self.step_count)
        for name, param in self.params.items():
            param -= lr * grads[name]
        self.step_count += 1


class AdamOptimizer:
    def __init__(
        self,
        params: dict[str, np.ndarray],
        schedule: LrSchedule,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.schedule = schedule
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def update(self, grads: dict[str, np.ndarray]) -> None:
        self.step_count += 1
        lr = self.schedule.lr(self.step_count - 1)
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for name, param in self.params.items():
            g = grads[name]
            self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[name] / b1c
            v_hat = self.v[name] / b2c
            param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.params:
            out[f"adam/m/{name}"] = self.m[name]
            out[f"adam/v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for name in self.params:
            self.m[name] = arrays[f"adam/m/{name}"].copy()
            self.v[name] = arrays[f"adam/v/{name}"].copy()
        self.step_count = step_count


def make_optimizer(kind: str, params: dict[str, np.ndarray], schedule: LrSchedule):
    if kind == "sgd":
        return SgdOptimizer(params, schedule)
    if kind == "adam":
        return AdamOptimizer(params, schedule)
    raise ValueError(f"unknown optimizer '{kind}'")
