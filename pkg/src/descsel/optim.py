"""Adam and momentum-SGD with an epoch-keyed learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolationError, InvalidInputError


@dataclass(frozen=True)
class Schedule:
    """Multiplicative learning-rate decay at epoch boundaries.

    `steps` is a sequence of (epoch, multiplier); the effective multiplier at
    epoch E is the product over entries with epoch <= E. An empty schedule is
    the identity.
    """

    steps: tuple = ()

    def multiplier_at(self, epoch: int) -> float:
        mult = 1.0
        for at_epoch, factor in self.steps:
            if epoch >= at_epoch:
                mult *= factor
        return mult

    @classmethod
    def every(cls, period: int, factor: float, total_epochs: int) -> "Schedule":
        """Decay by `factor` every `period` epochs (the usual staircase)."""
        if period < 1:
            raise InvalidInputError("schedule period must be >= 1")
        steps = tuple((e, factor) for e in range(period, max(total_epochs, period) + 1, period))
        return cls(steps)


class _OptimizerBase:
    def __init__(self, params: dict, learning_rate: float, schedule: Schedule):
        if learning_rate <= 0:
            raise InvalidInputError("learning rate must be positive")
        self.params = dict(params)
        self.learning_rate = learning_rate
        self.schedule = schedule

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def _gradients(self):
        grads = {name: p.grad for name, p in self.params.items()}
        if all(g is None for g in grads.values()):
            raise ContractViolationError("optimizer step before backward: no gradients populated")
        return grads


class Adam(_OptimizerBase):
    """Adam with standard bias correction."""

    def __init__(self, params, learning_rate=1e-3, betas=(0.9, 0.999), eps=1e-8,
                 schedule: Schedule = Schedule()):
        super().__init__(params, learning_rate, schedule)
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.value) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def step(self, epoch: int = 0):
        grads = self._gradients()
        self.t += 1
        b1, b2 = self.betas
        lr = self.learning_rate * self.schedule.multiplier_at(epoch)
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads[name]
            if g is None:
                continue
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * (g * g)
            m_hat = self.m[name] / c1
            v_hat = self.v[name] / c2
            new = p.value - lr * m_hat / (np.sqrt(v_hat) + self.eps)
            # float64 grads must not upcast a float32 model
            p.value = np.asarray(new, dtype=p.value.dtype)


class SGDMomentum(_OptimizerBase):
    def __init__(self, params, learning_rate=1e-3, momentum=0.9, schedule: Schedule = Schedule()):
        super().__init__(params, learning_rate, schedule)
        self.momentum = momentum
        self.buf = {k: np.zeros_like(p.value) for k, p in self.params.items()}

    def step(self, epoch: int = 0):
        grads = self._gradients()
        lr = self.learning_rate * self.schedule.multiplier_at(epoch)
        for name, p in self.params.items():
            g = grads[name]
            if g is None:
                continue
            self.buf[name] = self.momentum * self.buf[name] + g
            p.value = np.asarray(p.value - lr * self.buf[name], dtype=p.value.dtype)


def build_optimizer(kind: str, params, learning_rate, schedule: Schedule = Schedule(),
                    momentum=0.9):
    if kind == "adam":
        return Adam(params, learning_rate, schedule=schedule)
    if kind in ("sgd", "sgd-momentum"):
        return SGDMomentum(params, learning_rate, momentum=momentum, schedule=schedule)
    raise InvalidInputError(f"unknown optimizer kind: {kind!r}")
