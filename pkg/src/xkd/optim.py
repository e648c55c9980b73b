"""Adaptive-moment optimizer with decoupled weight decay, plus step schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autograd import ContractError, Tensor

ADAM_EPS = 1e-8


@dataclass
class Schedule:
    """Piecewise warm-up / cosine / constant schedule over integer steps.

    kind:
        "warmup-cosine": linear ramp 0 -> base over warmup_steps, then cosine
            interpolation base -> final over the remaining span.
        "cosine": cosine interpolation base -> final over the full span.
        "constant": always base.
    """

    base: float
    final: float = 0.0
    warmup_steps: int = 0
    total_steps: int = 1
    kind: str = "constant"

    def __post_init__(self):
        if self.kind not in ("warmup-cosine", "cosine", "constant"):
            raise ContractError(f"unknown schedule kind {self.kind!r}")
        if self.total_steps <= 0:
            raise ContractError("total_steps must be positive")
        if self.warmup_steps < 0:
            raise ContractError("warmup_steps must be non-negative")

    def value(self, step):
        return schedule_value(self, step)


def schedule_value(s: Schedule, step: int) -> float:
    """Evaluate a schedule at an integer step in [0, total_steps]."""
    if step < 0 or step > s.total_steps:
        raise ContractError(f"step {step} outside [0, {s.total_steps}]")
    if s.kind == "constant":
        return s.base
    warmup = s.warmup_steps if s.kind == "warmup-cosine" else 0
    if step < warmup:
        return s.base * step / warmup
    if step >= s.total_steps:
        return s.final  # exact endpoint, no trig round-off
    span = s.total_steps - warmup
    progress = (step - warmup) / span
    return s.final + (s.base - s.final) * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimizerState:
    """Per-parameter moment buffers and hyperparameters (AdamW-style).

    The moment lists are positionally aligned with the parameter list the
    state was created for; ``optimizer_step`` must be called with that list.
    """

    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)
    step_count: int = 0
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.0
    lr_schedule: Schedule = field(default_factory=lambda: Schedule(base=1e-3))

    @classmethod
    def create(cls, params, betas=(0.9, 0.95), weight_decay=0.0, lr_schedule=None):
        if not (0.0 < betas[0] < 1.0 and 0.0 < betas[1] < 1.0):
            raise ContractError(f"betas must lie in (0,1), got {betas}")
        if weight_decay < 0:
            raise ContractError("weight_decay must be non-negative")
        if lr_schedule is None:
            lr_schedule = Schedule(base=1e-3)
        return cls(
            first_moment=[np.zeros_like(p.data) for p in params],
            second_moment=[np.zeros_like(p.data) for p in params],
            step_count=0,
            betas=tuple(betas),
            weight_decay=float(weight_decay),
            lr_schedule=lr_schedule,
        )


def optimizer_step(params: list[Tensor], state: OptimizerState) -> None:
    """Apply one update with bias-corrected moments and decoupled decay.

    The learning rate is the schedule evaluated at the pre-increment step
    count (so a warm-up ramp starts at 0). The decay term
    ``param -= lr * wd * param`` is applied separately from the gradient term.
    """
    if len(params) != len(state.first_moment):
        raise ContractError(
            f"optimizer state holds {len(state.first_moment)} buffers, got {len(params)} params"
        )
    for p, m in zip(params, state.first_moment):
        if p.grad is None:
            raise ContractError("optimizer_step: parameter has no gradient")
        if p.grad.shape != m.shape:
            raise ContractError("optimizer_step: moment/parameter shape mismatch")

    sched_step = min(state.step_count, state.lr_schedule.total_steps)
    lr = schedule_value(state.lr_schedule, sched_step)
    b1, b2 = state.betas
    t = state.step_count + 1
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for p, m, v in zip(params, state.first_moment, state.second_moment):
        g = p.grad
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
        p.data -= lr * update
        if state.weight_decay:
            p.data -= lr * state.weight_decay * p.data
    state.step_count = t
