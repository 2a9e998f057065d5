"""Timestep distributions, the timeshift map and evaluation grids.

Convention: t = 0 is clean data, t = 1 is pure noise.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass
from typing import Union

import numpy as np
from scipy.special import expit, logit, ndtr, ndtri


def timeshift(alpha: float, t):
    """s(alpha, t) = alpha t / (1 + (alpha - 1) t), exact at both endpoints."""
    if not alpha > 0:
        raise ValueError(f"timeshift: alpha must be positive, got {alpha}")
    arr = np.asarray(t, dtype=np.float64)
    if ((arr < 0) | (arr > 1)).any() or not np.isfinite(arr).all():
        raise ValueError("timeshift: t must lie in [0, 1]")
    out = alpha * arr / (1.0 + (alpha - 1.0) * arr)
    out = np.where(arr == 1.0, 1.0, np.clip(out, 0.0, 1.0))
    return float(out) if np.ndim(t) == 0 else out


@dataclass(frozen=True)
class Uniform:
    kind = "uniform"


@dataclass(frozen=True)
class ShiftedUniform:
    alpha: float = 1.0
    kind = "shifted_uniform"

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("ShiftedUniform: alpha must be positive")


@dataclass(frozen=True)
class LogitNormal:
    mu: float = 0.0
    sigma: float = 1.0
    trainshift: float = 1.0
    kind = "logit_normal"

    def __post_init__(self):
        if not self.sigma > 0 or not self.trainshift > 0:
            raise ValueError("LogitNormal: sigma and trainshift must be positive")

    @property
    def shifted_mu(self) -> float:
        return self.mu + math.log(self.trainshift)


@dataclass(frozen=True)
class PlateauLogitNormal:
    """Logit-normal (with mu shifted by log trainshift) held flat above its mode."""

    mu: float = 0.0
    sigma: float = 1.0
    trainshift: float = 1.0
    kind = "plateau_logit_normal"

    def __post_init__(self):
        if not self.sigma > 0 or not self.trainshift > 0:
            raise ValueError("PlateauLogitNormal: sigma and trainshift must be positive")
        plateau_mode(self.shifted_mu, self.sigma)

    @property
    def shifted_mu(self) -> float:
        return self.mu + math.log(self.trainshift)


@dataclass(frozen=True)
class LowSnrMixture:
    base: "TimestepDistribution"
    p_hi: float = 0.05
    interval: tuple[float, float] = (0.95, 1.0)
    kind = "low_snr_mixture"

    def __post_init__(self):
        lo, hi = self.interval
        if not 0 <= self.p_hi <= 1:
            raise ValueError("LowSnrMixture: p_hi must be a probability")
        if not 0 <= lo < hi <= 1:
            raise ValueError(f"LowSnrMixture: bad interval {self.interval}")


TimestepDistribution = Union[Uniform, ShiftedUniform, LogitNormal, PlateauLogitNormal, LowSnrMixture]


# --------------------------------------------------------------------------
# logit-normal pieces


def logit_normal_pdf(t, mu: float, sigma: float):
    t = np.asarray(t, dtype=np.float64)
    inside = (t > 0) & (t < 1)
    tt = np.where(inside, t, 0.5)
    z = (logit(tt) - mu) / sigma
    pdf = np.exp(-0.5 * z * z) / (sigma * math.sqrt(2 * math.pi) * tt * (1 - tt))
    return np.where(inside, pdf, 0.0)


def logit_normal_cdf(t, mu: float, sigma: float):
    t = np.asarray(t, dtype=np.float64)
    tt = np.clip(t, 1e-300, 1 - 1e-16)
    out = ndtr((logit(tt) - mu) / sigma)
    return np.where(t <= 0, 0.0, np.where(t >= 1, 1.0, out))


def _mode_equation(t, mu, sigma):
    # stationary points of p_ln satisfy (logit t - mu) / sigma^2 = 2t - 1
    return (logit(t) - mu) / sigma**2 - (2 * t - 1)


@functools.lru_cache(maxsize=64)
def plateau_mode(mu: float, sigma: float) -> tuple[float, float, float]:
    """Mode, modal density and renormalizing constant of the plateau variant."""
    if not sigma > 0:
        raise ValueError("plateau_mode: sigma must be positive")
    grid = expit(np.linspace(mu - 12 * sigma - 2, mu + 12 * sigma + 2, 20001))
    grid = grid[(grid > 0) & (grid < 1)]
    g = _mode_equation(grid, mu, sigma)
    # an exact zero on the grid counts as positive so it is one crossing, not two
    sign = np.where(g < 0, -1, 1)
    sign_change = np.nonzero(np.diff(sign) != 0)[0]
    # g runs from -inf to +inf; a maximum is a - to + crossing
    maxima = [i for i in sign_change if sign[i] < 0]
    if len(sign_change) != 1 or len(maxima) != 1:
        raise ValueError(
            f"plateau_mode: logit-normal(mu={mu}, sigma={sigma}) is not unimodal; "
            "plateau variant undefined"
        )
    lo, hi = grid[maxima[0]], grid[maxima[0] + 1]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if _mode_equation(mid, mu, sigma) < 0:
            lo = mid
        else:
            hi = mid
    mode = 0.5 * (lo + hi)
    peak = float(logit_normal_pdf(mode, mu, sigma))
    mass = float(logit_normal_cdf(mode, mu, sigma)) + (1.0 - mode) * peak
    return mode, peak, 1.0 / mass


# --------------------------------------------------------------------------
# density / cdf / sampling


def density(dist: TimestepDistribution, t):
    t = np.asarray(t, dtype=np.float64)
    if isinstance(dist, Uniform):
        out = np.where((t >= 0) & (t <= 1), 1.0, 0.0)
    elif isinstance(dist, ShiftedUniform):
        a = dist.alpha
        out = np.where((t >= 0) & (t <= 1), a / (a + (1 - a) * t) ** 2, 0.0)
    elif isinstance(dist, LogitNormal):
        out = logit_normal_pdf(t, dist.shifted_mu, dist.sigma)
    elif isinstance(dist, PlateauLogitNormal):
        mode, peak, z = plateau_mode(dist.shifted_mu, dist.sigma)
        below = logit_normal_pdf(t, dist.shifted_mu, dist.sigma)
        out = z * np.where(t < mode, below, np.where(t <= 1, peak, 0.0))
        out = np.where(t <= 0, 0.0, out)
    elif isinstance(dist, LowSnrMixture):
        lo, hi = dist.interval
        box = np.where((t >= lo) & (t <= hi), 1.0 / (hi - lo), 0.0)
        out = (1 - dist.p_hi) * density(dist.base, t) + dist.p_hi * box
    else:
        raise TypeError(f"unknown distribution {dist!r}")
    return float(out) if out.ndim == 0 else out


def cdf(dist: TimestepDistribution, t):
    t = np.clip(np.asarray(t, dtype=np.float64), 0.0, 1.0)
    if isinstance(dist, Uniform):
        out = t
    elif isinstance(dist, ShiftedUniform):
        # inverse of the shift is the shift by 1/alpha
        out = timeshift(1.0 / dist.alpha, t)
    elif isinstance(dist, LogitNormal):
        out = logit_normal_cdf(t, dist.shifted_mu, dist.sigma)
    elif isinstance(dist, PlateauLogitNormal):
        mode, peak, z = plateau_mode(dist.shifted_mu, dist.sigma)
        below = logit_normal_cdf(np.minimum(t, mode), dist.shifted_mu, dist.sigma)
        out = z * (below + np.maximum(t - mode, 0.0) * peak)
        out = np.where(t >= 1, 1.0, out)
    elif isinstance(dist, LowSnrMixture):
        lo, hi = dist.interval
        box = np.clip((t - lo) / (hi - lo), 0.0, 1.0)
        out = (1 - dist.p_hi) * cdf(dist.base, t) + dist.p_hi * box
    else:
        raise TypeError(f"unknown distribution {dist!r}")
    return float(out) if np.ndim(out) == 0 else np.asarray(out)


def sample(dist: TimestepDistribution, rng: np.random.Generator, n: int) -> np.ndarray:
    if n < 1:
        raise ValueError("sample: n must be >= 1")
    if isinstance(dist, Uniform):
        return rng.random(n)
    if isinstance(dist, ShiftedUniform):
        return timeshift(dist.alpha, rng.random(n))
    if isinstance(dist, LogitNormal):
        t = expit(dist.mu + dist.sigma * rng.standard_normal(n))
        return timeshift(dist.trainshift, t)
    if isinstance(dist, PlateauLogitNormal):
        mu, sigma = dist.shifted_mu, dist.sigma
        mode, peak, z = plateau_mode(mu, sigma)
        u = rng.random(n) / z
        mass_below = float(logit_normal_cdf(mode, mu, sigma))
        below = expit(mu + sigma * ndtri(np.clip(u, 1e-300, mass_below)))
        above = mode + (u - mass_below) / peak
        return np.clip(np.where(u < mass_below, np.minimum(below, mode), above), 0.0, 1.0)
    if isinstance(dist, LowSnrMixture):
        lo, hi = dist.interval
        pick = rng.random(n) < dist.p_hi
        box = lo + (hi - lo) * rng.random(n)
        return np.where(pick, box, sample(dist.base, rng, n))
    raise TypeError(f"unknown distribution {dist!r}")


# --------------------------------------------------------------------------
# evaluation grids


@dataclass(frozen=True)
class EvalGrid:
    n_steps: int
    sampleshift: float
    timesteps: np.ndarray


def eval_grid(n_steps: int, sampleshift: float = 1.0) -> EvalGrid:
    if n_steps < 1:
        raise ValueError("eval_grid: n_steps must be >= 1")
    base = np.arange(n_steps, -1, -1) / n_steps
    ts = np.asarray(timeshift(sampleshift, base), dtype=np.float64)
    ts.flags.writeable = False
    return EvalGrid(n_steps, float(sampleshift), ts)


# --------------------------------------------------------------------------
# config serialization


def to_dict(dist: TimestepDistribution) -> dict:
    if isinstance(dist, Uniform):
        return {"kind": "uniform"}
    if isinstance(dist, ShiftedUniform):
        return {"kind": "shifted_uniform", "alpha": dist.alpha}
    if isinstance(dist, (LogitNormal, PlateauLogitNormal)):
        return {"kind": dist.kind, "mu": dist.mu, "sigma": dist.sigma, "trainshift": dist.trainshift}
    if isinstance(dist, LowSnrMixture):
        return {
            "kind": "low_snr_mixture",
            "base": to_dict(dist.base),
            "p_hi": dist.p_hi,
            "interval": list(dist.interval),
        }
    raise TypeError(f"unknown distribution {dist!r}")


def from_dict(d: dict) -> TimestepDistribution:
    d = dict(d)
    kind = d.pop("kind", None)
    if kind == "uniform":
        return Uniform()
    if kind == "shifted_uniform":
        return ShiftedUniform(float(d.get("alpha", 1.0)))
    if kind == "logit_normal":
        return LogitNormal(float(d.get("mu", 0.0)), float(d.get("sigma", 1.0)), float(d.get("trainshift", 1.0)))
    if kind == "plateau_logit_normal":
        return PlateauLogitNormal(
            float(d.get("mu", 0.0)), float(d.get("sigma", 1.0)), float(d.get("trainshift", 1.0))
        )
    if kind == "low_snr_mixture":
        lo, hi = d.get("interval", (0.95, 1.0))
        return LowSnrMixture(from_dict(d["base"]), float(d.get("p_hi", 0.05)), (float(lo), float(hi)))
    raise ValueError(f"unknown timestep distribution kind {kind!r}")
