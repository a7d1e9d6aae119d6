"""Rectified flow matching and the Euler sampler.

Training pairs a data sample x0 with Gaussian noise x1 along the straight
interpolant x_t = (1-t) x0 + t x1; the model regresses the constant path
velocity x1 - x0 under mean squared error. Sampling starts from noise at
t=1 and integrates the learned velocity backwards to t=0 with plain Euler
steps. When the velocity is exact the path is a straight line, so any
step count recovers x0; that exactness is a test oracle, not a hope.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, ShapeError
from .rng import Rng
from .tensor import Tensor


def interpolate(x0, x1, t: float):
    if not 0.0 <= float(t) <= 1.0:
        raise ContractError(f"t must lie in [0,1], got {t}")
    x0 = np.asarray(x0)
    x1 = np.asarray(x1)
    if x0.shape != x1.shape:
        raise ShapeError(f"interpolant shapes differ: {x0.shape} vs {x1.shape}")
    return (1.0 - t) * x0 + t * x1


@dataclass
class FlowBatch:
    x0: np.ndarray
    x1: np.ndarray
    t: float
    xt: np.ndarray


def make_batch(x0: np.ndarray, rng: Rng, t: float = None) -> FlowBatch:
    """Draw noise and a uniform t (unless supplied) from the given stream."""
    g = rng.np()
    if t is None:
        t = float(g.uniform())
    x1 = g.standard_normal(np.shape(x0)).astype(
        np.asarray(x0).dtype, copy=False)
    return FlowBatch(x0=np.asarray(x0), x1=x1, t=t, xt=interpolate(x0, x1, t))


@dataclass
class Conditioning:
    content: np.ndarray
    style: np.ndarray
    prompt_id: int = 0


def _as_velocity(model, conditioning):
    """Normalize (model, conditioning) into a v(xt, t) -> Tensor callable."""
    if conditioning is None:
        if not callable(model):
            raise ContractError(
                "without conditioning the model must be v(xt, t) callable")
        return model
    c = conditioning
    return lambda xt, t: model.forward(xt, c.content, c.style, c.prompt_id, t)


def fm_loss(model, batch: FlowBatch, conditioning=None) -> Tensor:
    """Mean squared error between predicted velocity and x1 - x0."""
    v = _as_velocity(model, conditioning)
    out = v(batch.xt, batch.t)
    target = batch.x1 - batch.x0
    if out.shape != target.shape:
        raise ContractError(
            f"velocity shape {out.shape} does not match target {target.shape}")
    return T.mean(T.square(out - Tensor(target.astype(out.dtype, copy=False))))


def euler_integrate(velocity, x1: np.ndarray, steps: int) -> np.ndarray:
    """Integrate dx/dt = v from t=1 (x1) down to t=0 with fixed steps."""
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    x = np.array(x1, copy=True)
    dt = 1.0 / steps
    with T.no_grad():
        for i in range(steps):
            t = 1.0 - i * dt
            v = velocity(x, t)
            v = v.data if isinstance(v, Tensor) else np.asarray(v)
            x -= dt * v
    return x


def sample(model, conditioning, steps: int, seed: int,
           guidance: float = 1.0, shape=None) -> np.ndarray:
    """Draw noise from `seed` and integrate the model velocity to an image.

    guidance != 1 blends the conditional velocity against one computed
    with the style reference zeroed: v = v_un + w (v_cond - v_un).
    """
    if steps < 1:
        raise ConfigError(f"steps must be >= 1, got {steps}")
    if shape is None:
        if conditioning is None:
            raise ConfigError("sample needs a shape when unconditioned")
        shape = np.shape(conditioning.content)
    x1 = Rng(seed).child("sample", "noise").np().standard_normal(shape)

    v_cond = _as_velocity(model, conditioning)
    if guidance == 1.0 or conditioning is None:
        velocity = v_cond
    else:
        uncond = replace(conditioning, style=np.zeros_like(conditioning.style))
        v_un = _as_velocity(model, uncond)

        def velocity(xt, t):
            a = v_un(xt, t)
            b = v_cond(xt, t)
            return a + T.scale(b - a, guidance)

    return euler_integrate(velocity, x1, steps)
