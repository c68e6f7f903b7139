"""Adam and the reduce-on-plateau learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import Tensor


class NonFiniteGradient(FloatingPointError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.t)


def adam_step(params, grads, state: AdamState, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, t: int | None = None):
    """One Adam update; returns (new params, new state). Inputs are not modified."""
    t = state.t + 1 if t is None else t
    if t < 1:
        raise ValueError("Adam step counter must start at 1")
    new_p, new_m, new_v = [], [], []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"parameter {i} has shape {p.shape}, gradient {g.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {i} at step {t}", index=i)
        m = beta1 * state.m[i] + (1 - beta1) * g
        v = beta2 * state.v[i] + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, AdamState(new_m, new_v, t)


class Adam:
    """Applies ``adam_step`` to a list of parameter tensors in place."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, names: Sequence[str] | None = None):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.names = list(names) if names is not None else [str(i) for i in range(len(self.params))]
        self.lr = lr
        self.state = AdamState.zeros_like([p.data for p in self.params])

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        try:
            new, self.state = adam_step([p.data for p in self.params], grads, self.state, self.lr)
        except NonFiniteGradient as exc:
            raise NonFiniteGradient(f"{exc} ({self.names[exc.index]})", exc.index) from exc
        for p, arr in zip(self.params, new):
            p.data = arr


@dataclass
class PlateauScheduler:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without a new best loss."""

    patience: int = 30
    factor: float = 0.1
    best: float = float("inf")
    stale: int = 0
    reductions: list[int] = field(default_factory=list)
    epoch: int = 0

    def __post_init__(self):
        if not 0 < self.factor < 1:
            raise ValueError("factor must lie in (0, 1)")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")

    def step(self, loss: float) -> bool:
        reduce = False
        if loss < self.best:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.patience:
                reduce = True
                self.stale = 0
                self.reductions.append(self.epoch)
        self.epoch += 1
        return reduce


def plateau_scheduler(history: Sequence[float], patience: int = 30, factor: float = 0.1) -> list[int]:
    """Epoch indices at which the learning rate would be reduced."""
    sched = PlateauScheduler(patience, factor)
    for loss in history:
        sched.step(float(loss))
    return sched.reductions
