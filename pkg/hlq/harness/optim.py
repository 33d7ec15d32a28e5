"""Optimizers and learning-rate schedules."""
import math
from dataclasses import dataclass

import numpy as np

from hlq.errors.handlers import ParameterError

OPTIMIZERS = ("sgd", "adamw")
SCHEDULES = ("step", "cosine", "constant")
STEP_MILESTONES = (0.3, 0.6, 0.8)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 5e-4

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ParameterError(f"unknown optimizer {self.kind!r}; choose from {OPTIMIZERS}")
        if self.lr < 0 or self.weight_decay < 0 or self.eps <= 0:
            raise ParameterError("learning rate, weight decay and eps must be non-negative")
        if not 0 <= self.momentum < 1 or not all(0 <= b < 1 for b in self.betas):
            raise ParameterError("momentum and betas must lie in [0, 1)")


class SGD:
    """Heavy-ball momentum with coupled L2 weight decay."""

    def __init__(self, config):
        self.config = config
        self.velocity = {}

    def step(self, params, grads, lr):
        c = self.config
        for name, value in params:
            grad = grads[name].astype(value.dtype, copy=False)
            if c.weight_decay:
                grad = grad + c.weight_decay * value
            v = self.velocity.get(name)
            v = grad.copy() if v is None else c.momentum * v + grad
            self.velocity[name] = v
            value -= lr * v


class AdamW:
    """Adam moments with decoupled weight decay."""

    def __init__(self, config):
        self.config = config
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads, lr):
        c = self.config
        beta1, beta2 = c.betas
        self.t += 1
        for name, value in params:
            grad = grads[name].astype(value.dtype, copy=False)
            m = beta1 * self.m.get(name, np.zeros_like(value)) + (1 - beta1) * grad
            v = beta2 * self.v.get(name, np.zeros_like(value)) + (1 - beta2) * grad * grad
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - beta1 ** self.t)
            v_hat = v / (1 - beta2 ** self.t)
            value -= lr * (m_hat / (np.sqrt(v_hat) + c.eps) + c.weight_decay * value)


def make_optimizer(config):
    return SGD(config) if config.kind == "sgd" else AdamW(config)


def learning_rate(schedule, base_lr, epoch, epochs, gamma=0.1):
    """lr for a 0-based `epoch`: step decay at 30/60/80% of the run, or cosine annealing."""
    if schedule == "constant":
        return base_lr
    if schedule == "step":
        # a milestone never falls on the first epoch
        drops = sum(1 for frac in STEP_MILESTONES if epoch >= max(1, int(round(frac * epochs))))
        return base_lr * gamma ** drops
    if schedule == "cosine":
        return 0.5 * base_lr * (1 + math.cos(math.pi * epoch / max(epochs, 1)))
    raise ParameterError(f"unknown schedule {schedule!r}; choose from {SCHEDULES}")
