"""Adam with bias correction, the only optimizer in the package."""
from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor


def adam_state(params: list[Tensor]) -> dict:
    """Fresh first/second moment buffers plus a step counter."""
    return {
        "step": 0,
        "m": [np.zeros_like(p.data) for p in params],
        "v": [np.zeros_like(p.data) for p in params],
    }


def adam_step(params: list[Tensor], grads: list[np.ndarray], state: dict,
              lr: float, betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """One in-place Adam update. `grads[i]` may be None (treated as zero)."""
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    state["step"] += 1
    t = state["step"]
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for i, p in enumerate(params):
        g = grads[i]
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ShapeError(
                f"grad shape {g.shape} does not match param {p.data.shape}")
        m = state["m"][i]
        v = state["v"][i]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def lr_at(step: int, steps: int, lr: float, warmup: int = 0,
          cosine: bool = False, warmup_power: int = 1) -> float:
    """Warmup to `lr`, then optionally cosine decay to zero.

    The warmup ramp is (step/warmup) ** warmup_power; powers above 1
    keep the early learning rate near zero so the first optimizer steps
    barely move the parameters."""
    if warmup and step < warmup:
        u = (step + 1) / warmup
        if warmup_power != 1:
            u = u ** warmup_power
        return lr * u
    if cosine:
        u = (step - warmup) / max(1, steps - warmup)
        return lr * 0.5 * (1.0 + np.cos(np.pi * u))
    return lr


class Adam:
    """Object wrapper tying params to their state."""

    def __init__(self, params: list[Tensor], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = adam_state(self.params)

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state,
                  self.lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
