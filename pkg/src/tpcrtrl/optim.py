"""Adam, SGD with momentum, global-norm clipping and a cosine warmup schedule.

Optimisers work on dicts of arrays.  Complex parameters are updated through
their real view, so real and imaginary parts get independent moments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, UsageError


def _real(a):
    if np.iscomplexobj(a):
        return np.ascontiguousarray(a).view(a.real.dtype)
    return a


@dataclass
class OptimiserState:
    step: int = 0
    first: dict = field(default_factory=dict)
    second: dict = field(default_factory=dict)


def _check_finite(grads):
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {k}")


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """Bias-corrected Adam.  Returns new (params, state); inputs are not modified."""
    _check_finite(grads)
    b1, b2 = betas
    step = state.step + 1
    new_params, first, second = {}, {}, {}
    for k, p in params.items():
        g = _real(np.asarray(grads[k], dtype=p.dtype))
        pr = _real(p)
        m = state.first.get(k, np.zeros_like(pr))
        v = state.second.get(k, np.zeros_like(pr))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new = pr - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_params[k] = new.view(p.dtype) if np.iscomplexobj(p) else new.astype(p.dtype, copy=False)
        first[k], second[k] = m, v
    return new_params, OptimiserState(step, first, second)


def sgd_step(params, grads, state, lr, momentum=0.0):
    """SGD with classical momentum: v <- momentum * v - lr * g; p <- p + v."""
    _check_finite(grads)
    new_params, vel = {}, {}
    for k, p in params.items():
        g = _real(np.asarray(grads[k], dtype=p.dtype))
        pr = _real(p)
        v = momentum * state.first.get(k, np.zeros_like(pr)) - lr * g
        new = pr + v
        new_params[k] = new.view(p.dtype) if np.iscomplexobj(p) else new.astype(p.dtype, copy=False)
        vel[k] = v
    return new_params, OptimiserState(state.step + 1, vel, {})


def global_norm(grads):
    # float64 squares: float32 overflows once a gradient entry passes ~1e19
    return math.sqrt(math.fsum(
        float(np.sum(_real(np.asarray(g)).astype(np.float64) ** 2)) for g in grads.values()
    ))


def clip_global_norm(grads, max_norm):
    """Scale every gradient by max_norm / ||g|| when the global norm exceeds ``max_norm``."""
    if not max_norm > 0:
        raise UsageError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return dict(grads)
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


def cosine_warmup_lr(step, total_steps, base_lr, warmup_frac=0.1):
    """Linear ramp from 0 over the warmup, then cosine decay to 0 at ``total_steps``."""
    if not 0 <= step <= total_steps:
        raise UsageError(f"step {step} outside [0, {total_steps}]")
    warmup = int(round(warmup_frac * total_steps))
    if warmup > 0 and step <= warmup:
        return base_lr * step / warmup
    span = max(total_steps - warmup, 1)
    progress = (step - warmup) / span
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


class Optimiser:
    """Stateful wrapper applying a named update rule to a CellParameters in place."""

    def __init__(self, name="adam", lr=5e-3, betas=(0.9, 0.999), eps=1e-8, momentum=0.0,
                 clip_norm=None, schedule="constant", warmup_frac=0.1, total_steps=None):
        if name not in ("adam", "sgd"):
            raise UsageError(f"unknown optimiser {name!r}")
        if schedule not in ("constant", "cosine"):
            raise UsageError(f"unknown schedule {schedule!r}")
        if schedule == "cosine" and not total_steps:
            raise UsageError("the cosine schedule needs total_steps")
        self.name, self.base_lr, self.betas, self.eps = name, lr, tuple(betas), eps
        self.momentum, self.clip_norm = momentum, clip_norm
        self.schedule, self.warmup_frac, self.total_steps = schedule, warmup_frac, total_steps
        self.state = OptimiserState()
        self.last_grad_norm = None

    def current_lr(self):
        if self.schedule == "constant":
            return self.base_lr
        step = min(self.state.step + 1, self.total_steps)
        return cosine_warmup_lr(step, self.total_steps, self.base_lr, self.warmup_frac)

    def apply(self, params, grads):
        self.last_grad_norm = global_norm(grads)
        if self.clip_norm:
            grads = clip_global_norm(grads, self.clip_norm)
        lr = self.current_lr()
        if self.name == "adam":
            new, self.state = adam_step(params.arrays, grads, self.state, lr, self.betas, self.eps)
        else:
            new, self.state = sgd_step(params.arrays, grads, self.state, lr, self.momentum)
        params.arrays.update(new)
        return params
