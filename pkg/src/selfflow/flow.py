"""Rectified-flow interpolation, velocity targets, loss and the Euler sampler."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .schedules import EvalGrid


@dataclass
class TokenBatch:
    x: np.ndarray  # [B, N, C]
    labels: np.ndarray | None = None  # [B] ints in [0, K)

    def __post_init__(self):
        if self.x.ndim != 3:
            raise ValueError(f"TokenBatch.x must be [B, N, C], got {self.x.shape}")
        if self.labels is not None and len(self.labels) != self.x.shape[0]:
            raise ValueError("TokenBatch: one label per batch element required")


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, dc.Tensor) else np.asarray(x, dtype=np.float64)


def interpolate(x0, x1, tau) -> np.ndarray:
    """x_tau = (1 - tau) x0 + tau x1 with tau given per token ([B, N]) or scalar."""
    x0, x1, tau = _data(x0), _data(x1), _data(tau)
    if x0.shape != x1.shape:
        raise ValueError(f"interpolate: shapes {x0.shape} and {x1.shape} differ")
    if ((tau < 0) | (tau > 1)).any():
        raise ValueError("interpolate: tau must lie in [0, 1]")
    if tau.ndim:
        if tau.shape != x0.shape[: tau.ndim]:
            raise ValueError(f"interpolate: tau shape {tau.shape} does not prefix {x0.shape}")
        tau = tau.reshape(tau.shape + (1,) * (x0.ndim - tau.ndim))
    return (1.0 - tau) * x0 + tau * x1


def velocity_target(x0, x1) -> np.ndarray:
    x0, x1 = _data(x0), _data(x1)
    if x0.shape != x1.shape:
        raise ValueError(f"velocity_target: shapes {x0.shape} and {x1.shape} differ")
    return x1 - x0


def gen_loss(pred: dc.Tensor, x0, x1) -> dc.Tensor:
    """Mean squared error between predicted and straight-line velocity."""
    v = velocity_target(x0, x1)
    if pred.shape != v.shape:
        raise dc.ShapeError(f"gen_loss: prediction {pred.shape} vs target {v.shape}")
    diff = pred - dc.Tensor(v)
    return dc.mean(diff * diff)


class SamplingError(ArithmeticError):
    pass


def euler_sample(
    model_fn: Callable[[np.ndarray, np.ndarray, np.ndarray | None], np.ndarray],
    x1,
    grid: EvalGrid,
    label=None,
) -> np.ndarray:
    """Integrate dx/dt = model_fn(x, t) from t = 1 back to t = 0 with Euler steps.

    ``model_fn`` receives the state, a homogeneous per-token timestep array
    of shape [B, N] and the labels.
    """
    ts = grid.timesteps
    if ts[0] != 1.0 or ts[-1] != 0.0 or not (np.diff(ts) < 0).all():
        raise ValueError("euler_sample: grid must descend strictly from 1 to 0")
    x = np.array(_data(x1), dtype=np.float64)
    for k in range(len(ts) - 1):
        tau = np.full(x.shape[:2], ts[k])
        v = _data(model_fn(x, tau, label))
        x = x + (ts[k + 1] - ts[k]) * v
        if not np.isfinite(x).all():
            raise SamplingError(f"euler_sample: non-finite state at step {k}")
    return x
