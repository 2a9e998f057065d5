"""Fréchet distance between Gaussian fits and layer-wise linear probing."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import data as D
from . import model as M
from .flow import euler_sample, interpolate
from .schedules import EvalGrid

log = logging.getLogger(__name__)


class EigenError(ArithmeticError):
    pass


def jacobi_eigh(a: np.ndarray, tol: float | None = None, max_sweeps: int = 60) -> tuple[np.ndarray, np.ndarray]:
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Rotations are scheduled round-robin so each round touches disjoint
    index pairs and can be applied as one vectorized block update.
    Returns ascending eigenvalues and the matching orthonormal eigenvectors
    (columns).
    """
    a = np.array(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"jacobi_eigh: expected a square matrix, got {a.shape}")
    a = 0.5 * (a + a.T)
    n = a.shape[0]
    v = np.eye(n)
    if n == 1:
        return a.diagonal().copy(), v
    scale = np.linalg.norm(a)
    if scale == 0:
        return np.zeros(n), v
    tol = 4 * n * np.finfo(np.float64).eps if tol is None else tol
    m = n + (n % 2)
    players = list(range(m))
    for sweep in range(max_sweeps):
        # summed directly: total minus diagonal energy cancels catastrophically
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol * scale:
            w = a.diagonal().copy()
            order = np.argsort(w)
            return w[order], v[:, order]
        for _ in range(m - 1):
            pairs = [(players[i], players[m - 1 - i]) for i in range(m // 2)]
            pairs = [(p, q) for p, q in pairs if p < n and q < n]
            p = np.array([min(pq) for pq in pairs])
            q = np.array([max(pq) for pq in pairs])
            apq = a[p, q]
            # entries negligible next to both diagonal terms are dropped
            # instead of rotated; rotating them only churns rounding noise
            tiny = np.abs(apq) <= 1e-18 * np.sqrt(np.abs(a[p, p] * a[q, q])) + 1e-300
            a[p[tiny], q[tiny]] = a[q[tiny], p[tiny]] = 0.0
            active = ~tiny
            if active.any():
                p, q, apq = p[active], q[active], apq[active]
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                rp, rq = a[p, :].copy(), a[q, :].copy()
                a[p, :] = c[:, None] * rp - s[:, None] * rq
                a[q, :] = s[:, None] * rp + c[:, None] * rq
                cp, cq = a[:, p].copy(), a[:, q].copy()
                a[:, p] = cp * c - cq * s
                a[:, q] = cp * s + cq * c
                vp, vq = v[:, p].copy(), v[:, q].copy()
                v[:, p] = vp * c - vq * s
                v[:, q] = vp * s + vq * c
            players = [players[0]] + [players[-1]] + players[1:-1]
    raise EigenError(f"jacobi_eigh: no convergence after {max_sweeps} sweeps (off-diagonal {off:.3e})")


def _lapack_eigh(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    try:
        return np.linalg.eigh(0.5 * (a + a.T))
    except np.linalg.LinAlgError as err:
        raise EigenError(f"eigh: {err}") from None


# The Jacobi solver is self-contained and exact to ~1e-14 but costs seconds
# at F=256 on one core; LAPACK is the default for scoring inside training runs.
EIGH_SOLVERS = {"jacobi": jacobi_eigh, "lapack": _lapack_eigh}


def eigh(a: np.ndarray, solver: str = "lapack") -> tuple[np.ndarray, np.ndarray]:
    try:
        fn = EIGH_SOLVERS[solver]
    except KeyError:
        raise ValueError(f"unknown eigensolver {solver!r}; choose from {sorted(EIGH_SOLVERS)}") from None
    return fn(a)


def sqrtm_psd(a: np.ndarray, solver: str = "lapack") -> np.ndarray:
    w, q = eigh(a, solver)
    return (q * np.sqrt(np.clip(w, 0.0, None))) @ q.T


@dataclass(frozen=True)
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @classmethod
    def from_features(cls, feats: np.ndarray, solver: str = "lapack") -> GaussianFit:
        feats = np.asarray(feats, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] < 2:
            raise ValueError(f"GaussianFit: need [M >= 2, F] features, got {feats.shape}")
        if not np.isfinite(feats).all():
            raise ValueError("GaussianFit: non-finite features")
        mu = feats.mean(axis=0)
        cov = np.cov(feats, rowvar=False).reshape(feats.shape[1], feats.shape[1])
        return cls(mu, _psd(cov, solver), feats.shape[0])


def _psd(cov: np.ndarray, solver: str) -> np.ndarray:
    cov = 0.5 * (cov + cov.T)
    w, q = eigh(cov, solver)
    if w.min() >= 0:
        return cov
    if w.min() < -1e-10 * max(1.0, abs(w).max()):
        log.warning("covariance has eigenvalue %.3e; clamping to 0", w.min())
    return (q * np.clip(w, 0.0, None)) @ q.T


def frechet(a: GaussianFit, b: GaussianFit, solver: str = "lapack") -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2), clamped at 0."""
    if a.mean.shape != b.mean.shape:
        raise ValueError(f"frechet: feature dims differ ({a.mean.shape} vs {b.mean.shape})")
    root_a = sqrtm_psd(a.cov, solver)
    inner = root_a @ b.cov @ root_a
    w, _ = eigh(inner, solver)
    cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    diff = a.mean - b.mean
    value = float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * cross)
    return max(value, 0.0)


# --------------------------------------------------------------------------
# model scoring


def pixel_features(tokens: np.ndarray, spec: D.DatasetSpec) -> np.ndarray:
    img = D.to_pixels(tokens, spec)
    return img.reshape(img.shape[0], -1)


def encoder_pooled_features(encoder: dict, cfg: M.TransformerConfig, tokens: np.ndarray, batch: int = 512):
    out = []
    for a in range(0, len(tokens), batch):
        x = tokens[a : a + batch]
        _, hs = M.forward(encoder, x, np.zeros(len(x)), None, heads=cfg.heads, upto=cfg.depth - 1)
        out.append(hs[-1].data.mean(axis=1))
    return np.concatenate(out)


def _features(tokens, spec, feature_space, encoder, cfg):
    if feature_space == "pixel":
        return pixel_features(tokens, spec)
    if feature_space == "probe_encoder":
        if encoder is None:
            raise ValueError("probe_encoder features need a trained encoder")
        return encoder_pooled_features(encoder, cfg, tokens)
    raise ValueError(f"unknown feature space {feature_space!r}")


def generate_samples(params, cfg: M.TransformerConfig, n: int, grid: EvalGrid, rng, labels=None) -> np.ndarray:
    x1 = rng.standard_normal((n, cfg.tokens, cfg.token_dim))
    if labels is None:
        labels = rng.integers(0, cfg.num_classes, n)
    samples = euler_sample(M.velocity_fn(params, cfg), x1, grid, labels)
    return samples


def score_samples(samples, heldout_tokens, spec, feature_space="pixel", encoder=None, cfg=None) -> float:
    fa = GaussianFit.from_features(_features(samples, spec, feature_space, encoder, cfg))
    fb = GaussianFit.from_features(_features(heldout_tokens, spec, feature_space, encoder, cfg))
    return frechet(fa, fb)


def score_model(
    params,
    cfg: M.TransformerConfig,
    heldout_tokens: np.ndarray,
    spec: D.DatasetSpec,
    n_samples: int,
    grid: EvalGrid,
    rng: np.random.Generator,
    feature_space: str = "pixel",
    encoder: dict | None = None,
) -> float:
    """Fréchet distance between model samples (labels uniform over K) and held-out data."""
    feat_dim = spec.image_size**2 if feature_space == "pixel" else cfg.hidden
    if n_samples < 10 * feat_dim:
        log.warning("n_samples=%d is below 10x the feature dimension (%d)", n_samples, feat_dim)
    samples = generate_samples(params, cfg, n_samples, grid, rng)
    return score_samples(samples, heldout_tokens, spec, feature_space, encoder, cfg)


def noise_floor(heldout_tokens: np.ndarray, spec: D.DatasetSpec, feature_space="pixel", encoder=None, cfg=None):
    """Fréchet distance between the two disjoint halves of the held-out split."""
    half = len(heldout_tokens) // 2
    return score_samples(heldout_tokens[:half], heldout_tokens[half : 2 * half], spec, feature_space, encoder, cfg)


# --------------------------------------------------------------------------
# linear probing


def linear_probe(
    features: np.ndarray,
    labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    l2: float = 1e-4,
    iters: int = 500,
    lr: float = 0.1,
) -> float:
    """Full-batch multinomial logistic regression; returns held-out top-1 accuracy.

    Features are standardized with training statistics before fitting.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels)
    classes = np.unique(y)
    if len(classes) < 2:
        raise ValueError("linear_probe: need at least two classes")
    K = int(max(y.max(), np.max(test_labels)) + 1)
    if len(x) < K:
        raise ValueError(f"linear_probe: {len(x)} samples for {K} classes")
    mu, sd = x.mean(axis=0), x.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    x = (x - mu) / sd
    xt = (np.asarray(test_features, dtype=np.float64) - mu) / sd
    onehot = np.eye(K)[y]
    w = np.zeros((x.shape[1], K))
    b = np.zeros(K)
    for _ in range(iters):
        z = x @ w + b
        z -= z.max(axis=1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        g = (p - onehot) / len(x)
        w -= lr * (x.T @ g + l2 * w)
        b -= lr * g.sum(axis=0)
    pred = (xt @ w + b).argmax(axis=1)
    return float((pred == np.asarray(test_labels)).mean())


def layer_features(params, cfg: M.TransformerConfig, tokens, tau_probe: float, rng, batch: int = 512):
    """Mean-pooled hidden states of every block for inputs noised at tau_probe."""
    if not 0 <= tau_probe <= 1:
        raise ValueError("tau_probe must lie in [0, 1]")
    feats = [[] for _ in range(cfg.depth)]
    for a in range(0, len(tokens), batch):
        x0 = tokens[a : a + batch]
        x1 = rng.standard_normal(x0.shape)
        tau = np.full(x0.shape[:2], tau_probe)
        _, hs = M.forward(params, interpolate(x0, x1, tau), tau, None, heads=cfg.heads, upto=cfg.depth - 1)
        for d, h in enumerate(hs):
            feats[d].append(h.data.mean(axis=1))
    return [np.concatenate(f) for f in feats]


def probe_all_layers(params, cfg, tokens, labels, tau_probe: float = 0.25, rng=None, l2: float = 1e-4):
    """Probe accuracy per block; the first half of ``tokens`` trains, the second half tests."""
    rng = rng if rng is not None else np.random.default_rng(0)
    feats = layer_features(params, cfg, tokens, tau_probe, rng)
    half = len(tokens) // 2
    labels = np.asarray(labels)
    return [
        linear_probe(f[:half], labels[:half], f[half : 2 * half], labels[half : 2 * half], l2=l2) for f in feats
    ]
