"""SGD with momentum and AdamW over name-keyed parameter dicts, updated in place."""

from __future__ import annotations

import math

import numpy as np

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
ADAMW_WEIGHT_DECAY = 0.01
SGD_MOMENTUM = 0.9


def sgd_momentum_step(params: dict, grads: dict, state: dict, lr: float,
                      momentum: float = SGD_MOMENTUM, weight_decay: float = 0.0) -> None:
    """``v = momentum*v + g (+ wd*w)``; ``w -= lr*v``. The first step uses ``v = g``."""
    for name, g in grads.items():
        w = params[name]
        if weight_decay:
            g = g + weight_decay * w
        v = state.get(name)
        if v is None:
            v = state[name] = np.array(g, dtype=w.dtype, copy=True)
        else:
            v *= momentum
            v += g
        w -= (lr * v).astype(w.dtype, copy=False)


def adamw_step(params: dict, grads: dict, state: dict, lr: float,
               betas: tuple[float, float] = ADAM_BETAS, eps: float = ADAM_EPS,
               weight_decay: float = ADAMW_WEIGHT_DECAY) -> None:
    """Bias-corrected Adam with decoupled weight decay; the step count lives in ``state``."""
    b1, b2 = betas
    step = state["__step__"] = state.get("__step__", 0) + 1
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    for name, g in grads.items():
        w = params[name]
        m, v = state.get(name, (None, None))
        if m is None:
            m = np.zeros_like(w)
            v = np.zeros_like(w)
            state[name] = (m, v)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if weight_decay:
            w -= (lr * weight_decay) * w
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(w.dtype, copy=False)


def learning_rate(base: float, step: int, total: int, schedule: str = "constant") -> float:
    if schedule == "constant" or total <= 1:
        return base
    if schedule == "cosine":
        return 0.5 * base * (1.0 + math.cos(math.pi * min(step, total) / total))
    raise ValueError(f"unknown schedule {schedule!r}")


class Optimizer:
    def __init__(self, kind: str, lr: float, weight_decay: float | None = None,
                 schedule: str = "constant", total_steps: int = 1):
        if kind not in ("sgd_momentum", "adamw"):
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.base_lr = lr
        if weight_decay is None:
            weight_decay = ADAMW_WEIGHT_DECAY if kind == "adamw" else 0.0
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.total_steps = total_steps
        self.state: dict = {}
        self.steps = 0

    def step(self, params: dict, grads: dict) -> None:
        lr = learning_rate(self.base_lr, self.steps, self.total_steps, self.schedule)
        if self.kind == "adamw":
            adamw_step(params, grads, self.state, lr, weight_decay=self.weight_decay)
        else:
            sgd_momentum_step(params, grads, self.state, lr, weight_decay=self.weight_decay)
        self.steps += 1
