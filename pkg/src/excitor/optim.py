"""AdamW with decoupled weight decay plus a warmup/cosine schedule."""

from __future__ import annotations

import math

import numpy as np

from .tensor import ContractError, Parameter


class GradientError(RuntimeError):
    """A gradient turned non-finite."""


class AdamW:
    """Decoupled weight decay: the decay term is applied next to the moment
    update, scaled by the step's learning rate, never entering the moments.
    Frozen parameters and parameters without a gradient are left untouched
    (no decay either)."""

    def __init__(self, params, lr: float = 1e-3, weight_decay: float = 0.0,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ContractError(f"lr must be > 0, got {lr}")
        if weight_decay < 0:
            raise ContractError(f"weight_decay must be >= 0, got {weight_decay}")
        b1, b2 = betas
        if not (0.0 <= b1 < 1.0 and 0.0 <= b2 < 1.0):
            raise ContractError(f"betas must lie in [0, 1), got {betas}")
        self.params: list[Parameter] = []
        seen = set()
        for p in params:
            if id(p) not in seen:
                seen.add(id(p))
                self.params.append(p)
        if not self.params:
            raise ContractError("optimizer needs at least one parameter")
        self.lr = lr
        self.weight_decay = weight_decay
        self.b1, self.b2 = b1, b2
        self.eps = eps
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for p, m, v in zip(self.params, self._m, self._v):
            if getattr(p, "frozen", False) or not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if not np.all(np.isfinite(g)):
                raise GradientError(f"non-finite gradient for {getattr(p, 'name', '?')!r} at step {self.t}")
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data -= lr * update


class LrSchedule:
    """Linear warmup to the base rate, then cosine decay toward zero over
    the remaining steps. value(step) is 0-indexed."""

    def __init__(self, base_lr: float, total_steps: int, warmup_steps: int):
        if base_lr <= 0:
            raise ContractError(f"base_lr must be > 0, got {base_lr}")
        if total_steps < 1:
            raise ContractError(f"total_steps must be >= 1, got {total_steps}")
        if not 0 <= warmup_steps <= total_steps:
            raise ContractError(f"warmup_steps {warmup_steps} outside [0, {total_steps}]")
        self.base_lr = base_lr
        self.total_steps = total_steps
        self.warmup_steps = warmup_steps

    def value(self, step: int) -> float:
        if step < 0 or step >= self.total_steps:
            raise ContractError(f"step {step} outside [0, {self.total_steps})")
        if step < self.warmup_steps:
            return self.base_lr * (step + 1) / self.warmup_steps
        if self.total_steps == self.warmup_steps:
            return self.base_lr
        progress = (step - self.warmup_steps) / (self.total_steps - self.warmup_steps)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
