"""Adam with bias correction and a linear-warmup / half-cosine decay schedule."""

from __future__ import annotations

import math
from typing import Mapping, Optional

import numpy as np

from .autodiff import Tensor

__all__ = ["Adam", "lr_at", "GradientNaN"]

# Internal coefficients are the standard defaults; they are surfaced here so
# configs and checkpoints can record them.
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class GradientNaN(FloatingPointError):
    """A parameter's gradient contained NaN/inf; the step was refused."""


def lr_at(state: "Adam", step: int) -> float:
    """Learning rate at a given step index.

    Linear ramp from 0 to base_lr over ``warmup_steps``, then half-cycle
    cosine decay to 0 at ``total_steps``. With ``total_steps == 0`` the
    schedule is constant at base_lr (used by short calibration runs).
    """
    base = state.base_lr
    warmup = state.warmup_steps
    total = state.total_steps
    if total <= 0:
        if step < 0:
            raise ValueError(f"lr_at: step {step} out of range")
        return base
    if step < 0 or step > total:
        raise ValueError(f"lr_at: step {step} outside [0, {total}]")
    if warmup > 0 and step < warmup:
        return base * step / warmup
    if total == warmup:
        return base
    return base * 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / (total - warmup)))


class Adam:
    """Bias-corrected Adam over a named parameter set.

    Moments are float64 arrays shaped like their parameters. ``step_count``
    counts completed steps; step t consumes ``lr_at(self, t)`` so training
    starts at the bottom of the warmup ramp.
    """

    def __init__(
        self,
        params: Mapping[str, Tensor],
        base_lr: float,
        warmup_steps: int = 0,
        total_steps: int = 0,
    ):
        if base_lr <= 0:
            raise ValueError("Adam: base_lr must be positive")
        self.params = dict(params)
        self.base_lr = float(base_lr)
        self.warmup_steps = int(warmup_steps)
        self.total_steps = int(total_steps)
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.step_count = 0

    def lr_at(self, step: int) -> float:
        return lr_at(self, step)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, grads: Optional[Mapping[str, np.ndarray]] = None) -> float:
        """Apply one update; returns the learning rate used.

        Gradients default to each parameter's ``.grad`` (missing means zero).
        Any non-finite gradient refuses the whole step, naming the parameter.
        """
        resolved: dict[str, np.ndarray] = {}
        for name, p in self.params.items():
            g = grads.get(name) if grads is not None else p.grad
            if g is None:
                continue
            g = np.asarray(g, dtype=np.float64)
            if g.shape != p.data.shape:
                raise ValueError(f"Adam: gradient shape {g.shape} does not match "
                                 f"parameter {name!r} shape {p.data.shape}")
            if not np.isfinite(g).all():
                raise GradientNaN(f"Adam: non-finite gradient for parameter {name!r}; step refused")
            resolved[name] = g

        t = self.step_count + 1
        lr = self.lr_at(min(self.step_count, self.total_steps) if self.total_steps > 0 else self.step_count)
        c1 = 1.0 - ADAM_BETA1**t
        c2 = 1.0 - ADAM_BETA2**t
        for name, g in resolved.items():
            m = self.m[name]
            v = self.v[name]
            m *= ADAM_BETA1
            m += (1.0 - ADAM_BETA1) * g
            v *= ADAM_BETA2
            v += (1.0 - ADAM_BETA2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
            self.params[name].data -= update
        self.step_count = t
        return lr

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat view of the optimizer state for checkpointing."""
        out: dict[str, np.ndarray] = {}
        for name in self.params:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: Mapping[str, np.ndarray], step_count: int) -> None:
        for name in self.params:
            self.m[name] = np.array(arrays[f"m/{name}"], dtype=np.float64)
            self.v[name] = np.array(arrays[f"v/{name}"], dtype=np.float64)
            if self.m[name].shape != self.params[name].data.shape:
                raise ValueError(f"Adam: checkpointed moment for {name!r} has wrong shape")
        self.step_count = int(step_count)
