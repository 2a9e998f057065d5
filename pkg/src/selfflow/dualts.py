"""Per-token noising plans: homogeneous, dual-timestep and degraded baselines."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import schedules
from .flow import interpolate

MODES = ("vanilla", "dual", "full_mask", "diffusion_forcing", "near_dual")
NEAR_DUAL_BAND = 0.2


@dataclass(frozen=True)
class NoisingPlan:
    mode: str
    t: float
    s: float
    mask: np.ndarray  # bool [N]
    tau: np.ndarray  # [N]
    tau_min: float


def make_plan(mode: str, t: float, s: float, mask, df_tau=None) -> NoisingPlan:
    """Assemble a plan from already-drawn randomness."""
    mask = np.asarray(mask, dtype=bool)
    if mode == "vanilla":
        mask = np.zeros_like(mask)
        tau = np.full(mask.shape, t)
    elif mode in ("dual", "near_dual"):
        tau = np.where(mask, s, t)
    elif mode == "full_mask":
        tau = np.where(mask, 1.0, t)
    elif mode == "diffusion_forcing":
        mask = np.zeros_like(mask)
        tau = np.asarray(df_tau, dtype=np.float64)
    else:
        raise ValueError(f"unknown plan mode {mode!r}; expected one of {MODES}")
    return NoisingPlan(mode, float(t), float(s), mask, tau, float(tau.min()))


def sample_plan(dist, R_M: float, N: int, mode: str, rng: np.random.Generator) -> NoisingPlan:
    """Draw one plan.

    The generator is consumed identically for every mode (t, s, mask
    uniforms, per-token draws, band position) so runs that differ only in
    mode see the same random stream.
    """
    if not 0 <= R_M <= 0.5:
        raise ValueError(f"masking ratio must lie in [0, 0.5], got {R_M}")
    if N < 1:
        raise ValueError("N must be >= 1")
    t, s = schedules.sample(dist, rng, 2)
    u = rng.random(N)
    df_tau = schedules.sample(dist, rng, N)
    v = rng.random()
    if mode == "near_dual":
        lo = max(0.0, t - NEAR_DUAL_BAND)
        s = lo + v * (t - lo)
    return make_plan(mode, t, s, u < R_M, df_tau)


def sample_plans(dist, R_M, N, mode, rngs: Sequence[np.random.Generator]) -> list[NoisingPlan]:
    return [sample_plan(dist, R_M, N, mode, r) for r in rngs]


def plan_arrays(plans: Sequence[NoisingPlan]) -> tuple[np.ndarray, np.ndarray]:
    """Stack plans into tau [B, N] and tau_min [B]."""
    return np.stack([p.tau for p in plans]), np.array([p.tau_min for p in plans])


def apply_plan(plans, x0, x1) -> tuple[np.ndarray, np.ndarray]:
    """Student input x_tau and teacher input x_{tau_min}, one plan per batch element."""
    if isinstance(plans, NoisingPlan):
        plans = [plans]
    x0 = np.asarray(x0, dtype=np.float64)
    if len(plans) != x0.shape[0]:
        raise ValueError(f"need one plan per batch element: {len(plans)} plans, batch {x0.shape[0]}")
    tau, tau_min = plan_arrays(plans)
    x_tau = interpolate(x0, x1, tau)
    x_min = interpolate(x0, x1, np.broadcast_to(tau_min[:, None], tau.shape))
    return x_tau, x_min
