"""SGD with Nesterov momentum, selective weight decay and the step schedule."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np


class DivergenceError(FloatingPointError):
    """Non-finite gradient reached the optimizer."""


def scaled_base_lr(k: int, micro_batch: int = 64) -> float:
    """Linear scaling rule for an accumulation factor ``k``: ``0.1 * micro_batch * k / 256``."""
    if k < 1:
        raise ValueError("accumulation factor must be >= 1")
    return 0.1 * (micro_batch * k) / 256


@dataclass
class SgdState:
    momentum_buffers: list[np.ndarray]
    decay_exempt: list[bool]
    momentum: float = 0.9
    weight_decay: float = 0.0

    @classmethod
    def for_params(cls, params: Sequence[np.ndarray], decay_exempt: Sequence[bool], momentum=0.9,
                   weight_decay=0.0) -> "SgdState":
        if len(decay_exempt) != len(params):
            raise ValueError("one decay flag per parameter tensor is required")
        return cls([np.zeros_like(p) for p in params], list(decay_exempt), momentum, weight_decay)


def sgd_step(params: list[np.ndarray], grads: Sequence[np.ndarray], state: SgdState, lr: float) -> list[np.ndarray]:
    """One Nesterov step, updating ``params`` and the momentum buffers in place.

    ``g = grad + wd * p`` (no decay on exempt tensors), ``v = mu * v + g``,
    ``p -= lr * (g + mu * v)``. Returns ``params`` for convenience.
    """
    if len(grads) != len(params):
        raise ValueError(f"got {len(grads)} gradients for {len(params)} parameters")
    for i, (p, d) in enumerate(zip(params, grads)):
        if d.shape != p.shape:
            raise ValueError(f"gradient {i} has shape {d.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(d)):
            raise DivergenceError(f"non-finite gradient for parameter {i}")
        dt = p.dtype.type
        g = d if (state.decay_exempt[i] or state.weight_decay == 0) else d + dt(state.weight_decay) * p
        v = state.momentum_buffers[i]
        v *= dt(state.momentum)
        v += g
        p -= dt(lr) * (g + dt(state.momentum) * v)
    return params


@dataclass
class LrSchedule:
    """Linear warm-up from 0, then multiply by ``decay`` at each milestone epoch."""

    base_lr: float
    steps_per_epoch: int
    warmup_epochs: float = 5
    milestones: list[float] = field(default_factory=list)
    decay: float = 0.1

    def epoch(self, step: int) -> float:
        return step / self.steps_per_epoch


def lr_at(schedule: LrSchedule, step: int) -> float:
    e = schedule.epoch(step)
    if e < schedule.warmup_epochs:
        return schedule.base_lr * e / schedule.warmup_epochs
    passed = sum(1 for m in schedule.milestones if e >= m)
    return schedule.base_lr * schedule.decay ** passed


PRESETS = {
    "cifar10": dict(weight_decay=5e-4, milestones=[150, 225], epochs=300, warmup_epochs=5),
    "imagenet": dict(weight_decay=1e-4, milestones=[30, 60, 80], epochs=90, warmup_epochs=5),
    "desk": dict(weight_decay=5e-4, milestones=None, epochs=None, warmup_epochs=5),
}


def preset_schedule(name: str, base_lr: float, steps_per_epoch: int, epochs: int | None = None,
                    warmup_epochs: float | None = None) -> tuple[LrSchedule, float, int]:
    """Return ``(schedule, weight_decay, epochs)`` for a named recipe.

    The desk preset decays at 50% and 75% of ``epochs``.
    """
    try:
        p = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown optimizer preset {name!r}") from None
    epochs = epochs if epochs is not None else p["epochs"]
    if epochs is None:
        raise ValueError("the desk preset needs an explicit epoch count")
    milestones = p["milestones"] if p["milestones"] is not None else [0.5 * epochs, 0.75 * epochs]
    warmup = p["warmup_epochs"] if warmup_epochs is None else warmup_epochs
    return LrSchedule(base_lr, steps_per_epoch, warmup, list(milestones)), p["weight_decay"], epochs
