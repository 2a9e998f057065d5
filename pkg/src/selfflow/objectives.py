"""Training objectives, EMA teacher, optimizer and the single train step.

Variants
--------
vanilla             flow loss only (plan mode selectable for the noise-schedule baselines)
selfflow            dual-timestep plan, student layer l -> head vs EMA teacher layer k at tau_min
selfflow_no_mask    homogeneous plan, teacher sees the student's input
sra_like            homogeneous plan, teacher sees a cleaner timestep (scale * t)
selfflow_near_dual  second timestep drawn just below t
selfflow_l1         selfflow with an l1 alignment metric
repa_external       alignment with a frozen, separately trained encoder on clean data
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass

import numpy as np

from . import diffcore as dc
from . import dualts, flow
from . import model as M

log = logging.getLogger(__name__)

VARIANTS = (
    "vanilla",
    "selfflow",
    "repa_external",
    "sra_like",
    "selfflow_no_mask",
    "selfflow_near_dual",
    "selfflow_l1",
)

_DEFAULT_PLAN = {
    "vanilla": "vanilla",
    "selfflow": "dual",
    "repa_external": "vanilla",
    "sra_like": "vanilla",
    "selfflow_no_mask": "vanilla",
    "selfflow_near_dual": "near_dual",
    "selfflow_l1": "dual",
}

_EMA_TEACHER = ("selfflow", "sra_like", "selfflow_no_mask", "selfflow_near_dual", "selfflow_l1")


class TrainingDivergence(ArithmeticError):
    pass


@dataclass(frozen=True)
class ObjectiveConfig:
    variant: str = "selfflow"
    gamma: float = 0.8
    ema_decay: float = 0.9999
    student_tap: int | None = None
    teacher_tap: int | None = None
    mask_ratio: float = 0.25
    plan_mode: str | None = None
    sra_teacher_scale: float = 0.8
    label_dropout: float = 0.1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown objective variant {self.variant!r}; expected one of {VARIANTS}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 <= self.ema_decay <= 1:
            raise ValueError("ema_decay must lie in [0, 1]")
        if self.variant in _EMA_TEACHER and self.ema_decay <= 0:
            raise ValueError(f"{self.variant} needs an EMA teacher (ema_decay > 0)")
        if not 0 <= self.mask_ratio <= 0.5:
            raise ValueError("mask_ratio must lie in [0, 0.5]")
        if self.plan_mode is not None and self.plan_mode not in dualts.MODES:
            raise ValueError(f"unknown plan mode {self.plan_mode!r}")
        if self.student_tap is not None and self.teacher_tap is not None:
            if not self.student_tap < self.teacher_tap:
                raise ValueError("student tap must be below teacher tap")

    @property
    def resolved_plan_mode(self) -> str:
        return self.plan_mode or _DEFAULT_PLAN[self.variant]

    def taps(self, cfg: M.TransformerConfig) -> tuple[int, int]:
        l, k = cfg.default_taps()
        l = l if self.student_tap is None else self.student_tap
        k = k if self.teacher_tap is None else self.teacher_tap
        if not 0 <= l < k < cfg.depth:
            raise ValueError(f"taps l={l}, k={k} invalid for depth {cfg.depth}")
        return l, k

    def to_dict(self) -> dict:
        return {k: v for k, v in asdict(self).items() if v is not None}


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    eps: float = 1e-8

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    student: dict
    teacher: dict
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def fresh(cls, params: dict) -> TrainState:
        return cls(
            student={k: np.array(v) for k, v in params.items()},
            teacher={k: np.array(v) for k, v in params.items()},
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


# --------------------------------------------------------------------------
# losses

zero_norm_tokens = {"count": 0}


def rep_loss(student_proj: dc.Tensor, teacher_hidden, metric: str = "cosine") -> dc.Tensor:
    """Negative mean token cosine similarity (or mean absolute difference)."""
    target = teacher_hidden.data if isinstance(teacher_hidden, dc.Tensor) else np.asarray(teacher_hidden)
    if target.shape != student_proj.shape:
        raise dc.ShapeError(f"rep_loss: shapes {student_proj.shape} and {target.shape} differ")
    if metric == "cosine":
        degenerate = int(
            ((np.linalg.norm(student_proj.data, axis=-1) == 0) | (np.linalg.norm(target, axis=-1) == 0)).sum()
        )
        if degenerate:
            zero_norm_tokens["count"] += degenerate
            log.warning("rep_loss: %d zero-norm tokens contribute 0", degenerate)
        return -dc.mean(dc.cosine_sim(student_proj, dc.Tensor(target)))
    if metric == "l1":
        return dc.mean(dc.abs_(student_proj - dc.Tensor(target)))
    raise ValueError(f"unknown alignment metric {metric!r}")


def repa_external_loss(student_proj: dc.Tensor, encoder_feats) -> dc.Tensor:
    return rep_loss(student_proj, encoder_feats, "cosine")


class FlatTree(dict):
    """Parameter tree whose arrays are consecutive views of one flat vector.

    ``flat`` is dropped as soon as an entry is replaced, so it never goes
    stale.
    """

    flat: np.ndarray | None = None

    def __setitem__(self, key, value):
        self.flat = None
        super().__setitem__(key, value)

    def __delitem__(self, key):
        self.flat = None
        super().__delitem__(key)

    def _invalidating(name):
        def method(self, *args, **kwargs):
            self.flat = None
            return getattr(dict, name)(self, *args, **kwargs)

        method.__name__ = name
        return method

    update = _invalidating("update")
    pop = _invalidating("pop")
    popitem = _invalidating("popitem")
    setdefault = _invalidating("setdefault")
    clear = _invalidating("clear")
    __ior__ = _invalidating("__ior__")
    del _invalidating


def _flat(tree: dict) -> np.ndarray:
    if isinstance(tree, FlatTree) and tree.flat is not None:
        return tree.flat
    return np.concatenate([a.reshape(-1) for a in tree.values()])


def _unflat(vec: np.ndarray, like: dict) -> FlatTree:
    out, i = FlatTree(), 0
    for k, a in like.items():
        out[k] = vec[i : i + a.size].reshape(a.shape)
        i += a.size
    out.flat = vec
    return out


def _check_trees(a: dict, b: dict, name: str) -> None:
    if a.keys() != b.keys():
        raise ValueError(f"{name}: parameter trees differ")
    for k, x in a.items():
        if x.shape != b[k].shape:
            raise ValueError(f"{name}: {k} has shapes {x.shape} and {b[k].shape}")


# Updates work on one concatenated vector per tree: a few large array ops
# instead of a dozen small ones per parameter. Results are views into that
# vector. Elementwise arithmetic is layout independent, so values are the
# same bits as a per-parameter loop would give.


def ema_update(teacher: dict, student: dict, decay: float) -> dict:
    _check_trees(teacher, student, "ema_update")
    out = decay * _flat(teacher) + (1.0 - decay) * _flat(student)
    return _unflat(out, teacher)


def adamw_update(params, grads, m, v, step: int, cfg: OptimizerConfig):
    """One decoupled-weight-decay Adam step; ``step`` is 1-based."""
    _check_trees(params, grads, "adamw_update")
    b1, b2 = cfg.beta1, cfg.beta2
    c1, c2 = 1.0 - b1**step, 1.0 - b2**step
    p, g = _flat(params), _flat(grads)
    mk = b1 * _flat(m) + (1.0 - b1) * g
    vk = b2 * _flat(v) + (1.0 - b2) * (g * g)
    update = (mk / c1) / (np.sqrt(vk / c2) + cfg.eps)
    new_p = p - cfg.lr * (update + cfg.weight_decay * p)
    return _unflat(new_p, params), _unflat(mk, params), _unflat(vk, params)


# --------------------------------------------------------------------------
# teacher targets


def _teacher_target(obj, state, cfg, x0, x1, x_min, tau_min, plans, labels, k, encoder):
    B, N = x0.shape[:2]
    v = obj.variant
    if v in ("selfflow", "selfflow_near_dual", "selfflow_l1"):
        x_in, tau = x_min, np.broadcast_to(tau_min[:, None], (B, N))
        params, lab = state.teacher, labels
    elif v == "selfflow_no_mask":
        tau, _ = dualts.plan_arrays(plans)
        x_in = flow.interpolate(x0, x1, tau)
        params, lab = state.teacher, labels
    elif v == "sra_like":
        t = np.array([p.t for p in plans]) * obj.sra_teacher_scale
        tau = np.broadcast_to(t[:, None], (B, N))
        x_in = flow.interpolate(x0, x1, tau)
        params, lab = state.teacher, labels
    elif v == "repa_external":
        if encoder is None:
            raise ValueError("repa_external needs a frozen encoder")
        return encoder_features(encoder, cfg, x0, k)
    else:
        raise ValueError(v)
    _, hs = M.forward(params, x_in, np.ascontiguousarray(tau), lab, heads=cfg.heads, upto=k)
    return hs[k].data


def train_step(
    state: TrainState,
    batch: flow.TokenBatch,
    x1: np.ndarray,
    obj: ObjectiveConfig,
    dist,
    opt: OptimizerConfig,
    cfg: M.TransformerConfig,
    rng: np.random.Generator,
    encoder: dict | None = None,
) -> tuple[TrainState, dict]:
    """One optimizer step on L_gen + gamma * L_rep followed by the EMA update."""
    x0 = batch.x
    if x0.shape != x1.shape:
        raise ValueError(f"train_step: batch {x0.shape} and noise {x1.shape} differ")
    B, N, _ = x0.shape
    plans = dualts.sample_plans(dist, obj.mask_ratio, N, obj.resolved_plan_mode, rng.spawn(B))
    labels = None
    if batch.labels is not None:
        drop = rng.random(B) < obj.label_dropout
        labels = np.where(drop, cfg.num_classes, batch.labels)
    x_tau, x_min = dualts.apply_plan(plans, x0, x1)
    tau, tau_min = dualts.plan_arrays(plans)
    l, k = obj.taps(cfg)

    l_rep_val = 0.0
    try:
        with dc.Tape() as tape:
            leaves = {name: tape.watch(p) for name, p in state.student.items()}
            velocity, hiddens = M.forward(leaves, x_tau, tau, labels, heads=cfg.heads)
            l_gen = flow.gen_loss(velocity, x0, x1)
            total = l_gen
            if obj.variant != "vanilla":
                target = _teacher_target(obj, state, cfg, x0, x1, x_min, tau_min, plans, labels, k, encoder)
                proj = M.project_head(leaves, hiddens[l])
                metric = "l1" if obj.variant == "selfflow_l1" else "cosine"
                l_rep = rep_loss(proj, target, metric)
                l_rep_val = l_rep.item()
                total = l_gen + obj.gamma * l_rep
        grads = dc.grad(total, list(leaves.values()))
    except dc.NonFiniteError as err:
        raise TrainingDivergence(
            f"non-finite values at step {state.step + 1} (variant {obj.variant}): {err}"
        ) from err

    g = {name: grads[leaf].data for name, leaf in leaves.items()}
    grad_norm = float(np.sqrt(sum(float((a * a).sum()) for a in g.values())))
    if not (np.isfinite(l_gen.item()) and np.isfinite(l_rep_val) and np.isfinite(grad_norm)):
        raise TrainingDivergence(
            f"non-finite loss at step {state.step + 1} (variant {obj.variant}): "
            f"l_gen={l_gen.item()}, l_rep={l_rep_val}, grad_norm={grad_norm}"
        )
    step = state.step + 1
    student, m, v = adamw_update(state.student, g, state.m, state.v, step, opt)
    teacher = ema_update(state.teacher, student, obj.ema_decay)
    metrics = {"step": step, "l_gen": l_gen.item(), "l_rep": l_rep_val, "grad_norm": grad_norm}
    return TrainState(student, teacher, m, v, step), metrics


# --------------------------------------------------------------------------
# frozen toy encoder standing in for an external representation model


class EncoderTrainingError(RuntimeError):
    pass


def encoder_features(encoder: dict, cfg: M.TransformerConfig, x0, k: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    _, hs = M.forward(encoder, x0, np.zeros(x0.shape[0]), None, heads=cfg.heads, upto=k)
    return hs[k].data


def _encoder_logits(params, cfg, x):
    _, hs = M.forward(params, x, np.zeros(x.shape[0]), None, heads=cfg.heads, upto=cfg.depth - 1)
    pooled = dc.mean(hs[-1], axis=1)
    return dc.linear(pooled, params["cls.w"], params["cls.b"])


def encoder_accuracy(encoder, cfg, x, y, batch_size: int = 512) -> float:
    correct = 0
    for a in range(0, len(x), batch_size):
        logits = _encoder_logits(encoder, cfg, x[a : a + batch_size]).data
        correct += int((logits.argmax(axis=-1) == y[a : a + batch_size]).sum())
    return correct / len(x)


def train_probe_encoder(
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    cfg: M.TransformerConfig,
    rng: np.random.Generator,
    steps: int = 400,
    batch_size: int = 32,
    target_accuracy: float = 0.95,
    opt: OptimizerConfig = OptimizerConfig(lr=2e-3, weight_decay=0.0),
) -> dict:
    """Train a classifier on clean tokens, check held-out accuracy, return frozen params."""
    params = M.init_params(cfg, rng)
    K = cfg.num_classes
    params["cls.w"] = 0.02 * rng.standard_normal((cfg.hidden, K))
    params["cls.b"] = np.zeros(K)
    state = TrainState.fresh(params)
    for step in range(1, steps + 1):
        idx = rng.integers(0, len(x_train), batch_size)
        xb, yb = x_train[idx], y_train[idx]
        onehot = np.eye(K)[yb]
        with dc.Tape() as tape:
            leaves = {n: tape.watch(p) for n, p in state.student.items()}
            z = _encoder_logits(leaves, cfg, xb)
            zmax = dc.Tensor(z.data.max(axis=-1, keepdims=True))
            shifted = z - dc.broadcast(zmax, z.shape)
            lse = dc.log(dc.sum_(dc.exp(shifted), axis=-1))
            picked = dc.sum_(shifted * dc.Tensor(onehot), axis=-1)
            loss = dc.mean(lse - picked)
        grads = dc.grad(loss, list(leaves.values()))
        g = {n: grads[leaf].data for n, leaf in leaves.items()}
        state.student, state.m, state.v = adamw_update(state.student, g, state.m, state.v, step, opt)
    acc = encoder_accuracy(state.student, cfg, x_val, y_val)
    if acc < target_accuracy:
        raise EncoderTrainingError(
            f"probe encoder reached {acc:.3f} held-out accuracy (< {target_accuracy}); "
            "use a simpler dataset spec or a larger budget"
        )
    frozen = {}
    for name, p in state.student.items():
        a = np.array(p)
        a.flags.writeable = False
        frozen[name] = a
    log.info("probe encoder held-out accuracy %.4f", acc)
    return frozen
