"""Small velocity-predicting transformer with per-token timestep conditioning.

Parameters live in an insertion-ordered ``dict[str, np.ndarray]``; that
order is the documented flat order used by checkpoints. ``forward`` accepts
either raw arrays (inference, nothing recorded) or tape leaves.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc

Params = dict


@dataclass(frozen=True)
class TransformerConfig:
    depth: int = 6
    hidden: int = 128
    heads: int = 4
    token_dim: int = 16
    tokens: int = 16
    num_classes: int = 8
    head_hidden: int | None = None
    mlp_ratio: int = 4
    init_std: float = 0.02

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2 so that student tap < teacher tap")
        if self.hidden % self.heads:
            raise ValueError(f"heads ({self.heads}) must divide hidden ({self.hidden})")
        if self.hidden % 2:
            raise ValueError("hidden must be even for sinusoidal features")

    @property
    def projection_width(self) -> int:
        return self.head_hidden or self.hidden

    def default_taps(self) -> tuple[int, int]:
        """Student/teacher hidden indices at 0.3 D and 0.7 D, with l < k."""
        k = min(int(round(0.7 * self.depth)), self.depth - 1)
        l = min(int(round(0.3 * self.depth)), k - 1)
        return max(l, 0), k

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


def param_shapes(cfg: TransformerConfig) -> dict[str, tuple[int, ...]]:
    C, H, N, K = cfg.token_dim, cfg.hidden, cfg.tokens, cfg.num_classes
    M, P = cfg.mlp_ratio * H, cfg.projection_width
    shapes = {
        "x_in.w": (C, H),
        "x_in.b": (H,),
        "pos": (N, H),
        "t_mlp.w1": (H, H),
        "t_mlp.b1": (H,),
        "t_mlp.w2": (H, H),
        "t_mlp.b2": (H,),
        "class_emb": (K + 1, H),
        "mod.w": (H, 6 * H),
        "mod.b": (6 * H,),
    }
    for i in range(cfg.depth):
        shapes |= {
            f"blocks.{i}.mod": (6 * H,),
            f"blocks.{i}.qkv.w": (H, 3 * H),
            f"blocks.{i}.qkv.b": (3 * H,),
            f"blocks.{i}.proj.w": (H, H),
            f"blocks.{i}.proj.b": (H,),
            f"blocks.{i}.mlp.w1": (H, M),
            f"blocks.{i}.mlp.b1": (M,),
            f"blocks.{i}.mlp.w2": (M, H),
            f"blocks.{i}.mlp.b2": (H,),
        }
    shapes |= {
        "final.mod.w": (H, 2 * H),
        "final.mod.b": (2 * H,),
        "out.w": (H, C),
        "out.b": (C,),
        "head.w1": (H, P),
        "head.b1": (P,),
        "head.w2": (P, P),
        "head.b2": (P,),
        "head.w3": (P, H),
        "head.b3": (H,),
    }
    return shapes


# zero-initialised so the untrained model predicts zero velocity and every
# block starts as the identity
_ZERO_INIT = ("mod.w", "final.mod.w", "out.w")


def param_count(cfg: TransformerConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def init_params(cfg: TransformerConfig, rng: np.random.Generator) -> Params:
    params = {}
    for name, shape in param_shapes(cfg).items():
        if len(shape) == 1 or name in _ZERO_INIT:
            params[name] = np.zeros(shape)
        else:
            w = rng.standard_normal(shape)
            # truncate at two standard deviations by resampling
            bad = np.abs(w) > 2
            while bad.any():
                w[bad] = rng.standard_normal(int(bad.sum()))
                bad = np.abs(w) > 2
            params[name] = cfg.init_std * w
    return params


def _t(x):
    return dc.as_tensor(x)


def sinusoidal_features(tau: np.ndarray, width: int) -> np.ndarray:
    freqs = np.exp(np.linspace(0.0, math.log(1e4), width // 2))
    ang = np.asarray(tau, dtype=np.float64)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def timestep_embed(params: Params, tau) -> dc.Tensor:
    """Embed timesteps of shape [B, N] (per token) or [B] (per sample)."""
    tau = np.asarray(tau.data if isinstance(tau, dc.Tensor) else tau, dtype=np.float64)
    if ((tau < 0) | (tau > 1)).any():
        raise ValueError("timestep_embed: tau must lie in [0, 1]")
    H = params["t_mlp.w1"].shape[0]
    feats = dc.Tensor(sinusoidal_features(tau, H))
    h = dc.silu(dc.linear(feats, params["t_mlp.w1"], params["t_mlp.b1"]))
    return dc.linear(h, params["t_mlp.w2"], params["t_mlp.b2"])


def _lin(params, name, x):
    return dc.linear(x, params[name + ".w"], params[name + ".b"])


def _attention(params, i, y, heads):
    qkv = _lin(params, f"blocks.{i}.qkv", y)
    return _lin(params, f"blocks.{i}.proj", dc.attention(qkv, heads))


def _mlp(params, i, y):
    h = dc.gelu(dc.linear(y, params[f"blocks.{i}.mlp.w1"], params[f"blocks.{i}.mlp.b1"]))
    return dc.linear(h, params[f"blocks.{i}.mlp.w2"], params[f"blocks.{i}.mlp.b2"])


def _conditioning(params, tau, label, B, N):
    K1, H = params["class_emb"].shape
    if label is None:
        label = np.full(B, K1 - 1)
    label = np.asarray(label)
    # index K is the unconditional slot
    if label.shape != (B,) or (label < 0).any() or (label > K1 - 1).any():
        raise ValueError(f"labels must be ints in [0, {K1 - 1}] per batch element, got {label}")
    onehot = np.zeros((B, K1))
    onehot[np.arange(B), label.astype(int)] = 1.0
    cemb = dc.Tensor(onehot) @ _t(params["class_emb"])
    temb = timestep_embed(params, tau)
    if temb.ndim == 2:
        return dc.broadcast((temb + cemb).reshape(B, 1, H), (B, N, H))
    return temb + dc.broadcast(cemb.reshape(B, 1, H), (B, N, H))


def forward(
    params: Params,
    x,
    tau,
    label=None,
    *,
    heads: int,
    upto: int | None = None,
    fused: bool = True,
) -> tuple[dc.Tensor | None, list[dc.Tensor]]:
    """Velocity prediction and the post-block hidden state of every block.

    ``tau`` is [B, N] for per-token conditioning or [B] for one timestep per
    sample. ``label`` of None selects the unconditional class slot; an
    explicit label equal to K does too. With ``upto`` set, stops after that
    block index and returns ``None`` for the velocity. ``fused=False``
    builds each block from elementary primitives instead of the single
    fused block primitive; both paths compute the same function.
    """
    x = _t(x)
    if x.ndim != 3:
        raise ValueError(f"forward: x must be [B, N, C], got {x.shape}")
    B, N, C = x.shape
    if params["x_in.w"].shape[0] != C or params["pos"].shape[0] != N:
        raise ValueError(f"forward: input {x.shape} does not match the model")
    tau_arr = np.asarray(tau.data if isinstance(tau, dc.Tensor) else tau, dtype=np.float64)
    if tau_arr.shape not in ((B, N), (B,)):
        raise ValueError(f"forward: tau must be [B, N] or [B], got {tau_arr.shape}")

    h = _lin(params, "x_in", x) + _t(params["pos"])
    c = _conditioning(params, tau_arr, label, B, N)
    sc = dc.silu(c)
    mod = _lin(params, "mod", sc)
    H = h.shape[-1]
    hiddens = []
    last = len([k for k in params if k.endswith(".qkv.w")]) - 1 if upto is None else upto
    for i in range(last + 1):
        m = mod + _t(params[f"blocks.{i}.mod"])
        if fused:
            b = f"blocks.{i}."
            weights = [params[b + n] for n in ("qkv.w", "qkv.b", "proj.w", "proj.b", "mlp.w1", "mlp.b1", "mlp.w2", "mlp.b2")]
            h = dc.adaln_block(h, m, *weights, heads=heads)
        else:
            shift1, scale1, gate1, shift2, scale2, gate2 = (m[..., j * H : (j + 1) * H] for j in range(6))
            h = h + gate1 * _attention(params, i, dc.modulate(h, shift1, scale1), heads)
            h = h + gate2 * _mlp(params, i, dc.modulate(h, shift2, scale2))
        hiddens.append(h)
    if upto is not None:
        return None, hiddens
    fm = _lin(params, "final.mod", sc)
    y = dc.modulate(h, fm[..., :H], fm[..., H:])
    velocity = _lin(params, "out", y)
    return velocity, hiddens


def project_head(params: Params, hidden) -> dc.Tensor:
    """Three-layer SiLU MLP mapping hidden states to the alignment space."""
    h = dc.silu(dc.linear(hidden, params["head.w1"], params["head.b1"]))
    h = dc.silu(dc.linear(h, params["head.w2"], params["head.b2"]))
    return dc.linear(h, params["head.w3"], params["head.b3"])


def velocity_fn(params: Params, cfg: TransformerConfig, batch_size: int = 128):
    """Wrap ``forward`` as a numpy ``(x, tau, label) -> velocity`` closure, chunked."""

    def fn(x, tau, label):
        out = np.empty_like(x)
        for a in range(0, x.shape[0], batch_size):
            lab = None if label is None else np.asarray(label)[a : a + batch_size]
            v, _ = forward(params, x[a : a + batch_size], tau[a : a + batch_size], lab, heads=cfg.heads)
            out[a : a + batch_size] = v.data
        return out

    return fn
