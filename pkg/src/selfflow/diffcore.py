"""Dense f64 tensors with tape-based reverse-mode differentiation.

Every differentiable computation in the package is expressed with the
primitives registered here. A :class:`Tape` records primitive applications
whose inputs descend from watched leaves; :func:`grad` walks the record
backwards applying each primitive's adjoint rule.

Broadcasting in binary primitives is restricted to scalar broadcast and
leading-axis expansion (the smaller shape must be a suffix of the larger).
Anything else has to go through the explicit :func:`broadcast` primitive.
"""

from __future__ import annotations

from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np

LAYERNORM_EPS = 1e-6


class DiffcoreError(ValueError):
    pass


class ShapeError(DiffcoreError):
    pass


class NonFiniteError(DiffcoreError, ArithmeticError):
    pass


class Tensor:
    """Immutable f64 array, optionally attached to a recording tape."""

    __slots__ = ("data", "tape", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data: Any, *, _checked: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not _checked and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        arr = arr.view()
        arr.flags.writeable = False
        self.data = arr
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return np.array(self.data)

    def __repr__(self) -> str:
        tag = " tracked" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return slice_(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Op:
    """A primitive. With ``saves`` set, ``forward`` returns ``(value, ctx)``
    and ``backward`` receives that ``ctx`` keyword, so intermediates are not
    recomputed."""

    name: str
    forward: Callable[..., Any]
    backward: Callable[..., tuple]
    saves: bool = False

    def value(self, *args, **attrs) -> np.ndarray:
        out = self.forward(*args, **attrs)
        return out[0] if self.saves else out


OPS: dict[str, Op] = {}


def register(name: str, forward: Callable, backward: Callable, saves: bool = False) -> Op:
    op = Op(name, forward, backward, saves)
    OPS[name] = op
    return op


@dataclass
class Node:
    op: Op
    inputs: tuple[Tensor, ...]
    attrs: dict
    out: Tensor
    ctx: Any = None


_ACTIVE: list[Tape] = []


@dataclass
class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; only operations executed while the tape is
    active and that consume a tensor already attached to it are recorded.
    """

    nodes: list[Node] = field(default_factory=list)
    leaves: dict[int, Tensor] = field(default_factory=dict)

    def __enter__(self) -> Tape:
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def watch(self, value: Any) -> Tensor:
        """Register ``value`` as a differentiable leaf of this tape."""
        t = Tensor(value.data if isinstance(value, Tensor) else value)
        t.tape = self
        self.leaves[id(t)] = t
        return t

    def replay(self, leaf_values: dict[Tensor, np.ndarray] | None = None) -> dict[int, np.ndarray]:
        """Re-execute the record from the leaves; returns values keyed by tensor id."""
        values: dict[int, np.ndarray] = {
            k: np.asarray(v.data) for k, v in self.leaves.items()
        }
        for leaf, val in (leaf_values or {}).items():
            values[id(leaf)] = np.asarray(val, dtype=np.float64)
        for node in self.nodes:
            args = [values.get(id(x), x.data) for x in node.inputs]
            if node.op.name == "concat":
                values[id(node.out)] = node.op.value(args, **node.attrs)
            else:
                values[id(node.out)] = node.op.value(*args, **node.attrs)
        return values


def _current_tape(inputs: Sequence[Tensor]) -> Tape | None:
    if not _ACTIVE:
        return None
    tape = _ACTIVE[-1]
    for x in inputs:
        if x.tape is tape:
            return tape
    return None


def apply(op: Op, inputs: Sequence[Tensor], **attrs) -> Tensor:
    if op.name == "concat":
        out_data = op.forward([x.data for x in inputs], **attrs)
    else:
        out_data = op.forward(*(x.data for x in inputs), **attrs)
    ctx = None
    if op.saves:
        out_data, ctx = out_data
    if not np.isfinite(out_data).all():
        raise NonFiniteError(f"{op.name} produced non-finite values")
    out = Tensor(out_data, _checked=True)
    tape = _current_tape(inputs)
    if tape is not None:
        out.tape = tape
        tape.nodes.append(Node(op, tuple(inputs), attrs, out, ctx))
    return out


def grad(loss: Tensor, params: Sequence[Tensor]) -> dict[Tensor, Tensor]:
    """Return d(loss)/d(param) for each leaf in ``params``."""
    if loss.shape != ():
        raise DiffcoreError(f"loss must be a scalar, got shape {loss.shape}")
    tape = loss.tape
    if tape is None:
        if any(p.tape is None for p in params):
            raise DiffcoreError("params were not recorded as leaves of any tape")
        tape = params[0].tape
    for p in params:
        if p.tape is not tape or id(p) not in tape.leaves:
            raise DiffcoreError(f"param {p!r} is not a recorded leaf of the loss tape")

    adj: dict[int, np.ndarray] = {}
    if loss.tape is not None:
        adj[id(loss)] = np.ones(())
        for node in reversed(tape.nodes):
            g = adj.pop(id(node.out), None)
            if g is None:
                continue
            if node.op.name == "concat":
                in_grads = node.op.backward(g, node.out.data, [x.data for x in node.inputs], **node.attrs)
            elif node.op.saves:
                in_grads = node.op.backward(
                    g, node.out.data, *(x.data for x in node.inputs), ctx=node.ctx, **node.attrs
                )
            else:
                in_grads = node.op.backward(g, node.out.data, *(x.data for x in node.inputs), **node.attrs)
            for x, gx in zip(node.inputs, in_grads):
                if x.tape is not tape or gx is None:
                    continue
                k = id(x)
                if k in adj:
                    adj[k] = adj[k] + gx
                else:
                    adj[k] = gx
    out = {}
    for p in params:
        g = adj.get(id(p))
        out[p] = Tensor(np.zeros(p.shape) if g is None else np.broadcast_to(g, p.shape), _checked=True)
    return out


# --------------------------------------------------------------------------
# shape helpers


def _check_binary(a: tuple, b: tuple, name: str) -> None:
    if a == b or a == () or b == ():
        return
    short, long_ = (a, b) if len(a) < len(b) else (b, a)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return
    raise ShapeError(f"{name}: incompatible shapes {a} and {b}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _binary(op: Op, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_binary(a.shape, b.shape, op.name)
    return apply(op, (a, b))


# --------------------------------------------------------------------------
# elementwise arithmetic

_add = register(
    "add",
    lambda a, b: a + b,
    lambda g, y, a, b: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
)
_sub = register(
    "sub",
    lambda a, b: a - b,
    lambda g, y, a, b: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
)
_mul = register(
    "mul",
    lambda a, b: a * b,
    lambda g, y, a, b: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)),
)
_div = register(
    "div",
    lambda a, b: a / b,
    lambda g, y, a, b: (_unbroadcast(g / b, a.shape), _unbroadcast(-g * y / b, b.shape)),
)
_neg = register("neg", lambda a: -a, lambda g, y, a: (-g,))


def add(a, b) -> Tensor:
    return _binary(_add, a, b)


def sub(a, b) -> Tensor:
    return _binary(_sub, a, b)


def mul(a, b) -> Tensor:
    return _binary(_mul, a, b)


def div(a, b) -> Tensor:
    return _binary(_div, a, b)


def neg(a) -> Tensor:
    return apply(_neg, (as_tensor(a),))


# --------------------------------------------------------------------------
# linear algebra and layout


def _matmul_fwd(a, b):
    if b.ndim == 2 and a.ndim > 2:
        return (a.reshape(-1, a.shape[-1]) @ b).reshape(a.shape[:-1] + (b.shape[-1],))
    return a @ b


def _matmul_bwd(g, y, a, b):
    if b.ndim == 2 and a.ndim > 2:
        g2 = g.reshape(-1, g.shape[-1])
        ga = (g2 @ b.T).reshape(a.shape)
        gb = a.reshape(-1, a.shape[-1]).T @ g2
        return ga, gb
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


_matmul = register("matmul", _matmul_fwd, _matmul_bwd)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    _check_binary(a.shape[:-2], b.shape[:-2], "matmul")
    return apply(_matmul, (a, b))


def _transpose_bwd(g, y, a, axes):
    return (np.transpose(g, np.argsort(axes)),)


_transpose = register("transpose", lambda a, axes: np.transpose(a, axes), _transpose_bwd)


def transpose(a, axes: Sequence[int] | None = None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {a.shape}")
    return apply(_transpose, (a,), axes=axes)


_reshape = register(
    "reshape",
    lambda a, shape: np.reshape(a, shape),
    lambda g, y, a, shape: (np.reshape(g, a.shape),),
)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.size or any(s < 0 for s in shape):
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {shape}")
    return apply(_reshape, (a,), shape=shape)


def _concat_bwd(g, y, arrays, axis):
    bounds = np.cumsum([x.shape[axis] for x in arrays])[:-1]
    return tuple(np.split(g, bounds, axis=axis))


_concat = register("concat", lambda arrays, axis: np.concatenate(arrays, axis=axis), _concat_bwd)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    ref = ts[0].shape
    ax = axis % len(ref)
    for t in ts[1:]:
        if len(t.shape) != len(ref) or any(
            s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax
        ):
            raise ShapeError(f"concat: incompatible shapes {ref} and {t.shape}")
    return apply(_concat, ts, axis=ax)


def _slice_bwd(g, y, a, index):
    out = np.zeros(a.shape)
    out[index] = g
    return (out,)


_slice = register("slice", lambda a, index: a[index], _slice_bwd)


def slice_(a, index) -> Tensor:
    a = as_tensor(a)
    idx = index if isinstance(index, tuple) else (index,)
    for i in idx:
        if not (isinstance(i, (slice, int)) or i is Ellipsis or i is None):
            raise DiffcoreError(f"slice: only basic indexing is supported, got {type(i).__name__}")
    return apply(_slice, (a,), index=index)


def _broadcast_fwd(a, shape):
    return np.broadcast_to(a, shape)


_broadcast = register(
    "broadcast", _broadcast_fwd, lambda g, y, a, shape: (_unbroadcast(g, a.shape),)
)


def broadcast(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    try:
        np.broadcast_shapes(a.shape, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}") from None
    if np.broadcast_shapes(a.shape, shape) != shape:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {shape}")
    return apply(_broadcast, (a,), shape=shape)


# --------------------------------------------------------------------------
# reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def _sum_bwd(g, y, a, axis, keepdims):
    if not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g, a.shape),)


_sum = register("sum", lambda a, axis, keepdims: np.sum(a, axis=axis, keepdims=keepdims), _sum_bwd)


def _mean_bwd(g, y, a, axis, keepdims):
    n = int(np.prod([a.shape[i] for i in axis]))
    if not keepdims:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, a.shape),)


_mean = register("mean", lambda a, axis, keepdims: np.mean(a, axis=axis, keepdims=keepdims), _mean_bwd)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return apply(_sum, (a,), axis=_norm_axis(axis, a.ndim), keepdims=keepdims)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    return apply(_mean, (a,), axis=_norm_axis(axis, a.ndim), keepdims=keepdims)


# --------------------------------------------------------------------------
# elementwise functions

_exp = register("exp", np.exp, lambda g, y, a: (g * y,))
_log = register("log", np.log, lambda g, y, a: (g / a,))
_sqrt = register("sqrt", np.sqrt, lambda g, y, a: (g * 0.5 / y,))
_abs = register("abs", np.abs, lambda g, y, a: (g * np.sign(a),))
_power = register(
    "power",
    lambda a, p: np.power(a, p),
    lambda g, y, a, p: (g * p * np.power(a, p - 1),),
)


def exp(a) -> Tensor:
    return apply(_exp, (as_tensor(a),))


def log(a) -> Tensor:
    a = as_tensor(a)
    if (a.data <= 0).any():
        raise NonFiniteError("log: non-positive input")
    return apply(_log, (a,))


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    if (a.data < 0).any():
        raise NonFiniteError("sqrt: negative input")
    return apply(_sqrt, (a,))


def abs_(a) -> Tensor:
    return apply(_abs, (as_tensor(a),))


def power(a, p: float) -> Tensor:
    if isinstance(p, Tensor):
        raise DiffcoreError("power: exponent must be a python scalar")
    return apply(_power, (as_tensor(a),), p=float(p))


def _softmax_fwd(a):
    z = np.exp(a - a.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


_softmax = register(
    "softmax",
    _softmax_fwd,
    lambda g, y, a: (y * (g - (g * y).sum(axis=-1, keepdims=True)),),
)


def softmax(a) -> Tensor:
    return apply(_softmax, (as_tensor(a),))


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _silu_fwd(a):
    s = _sigmoid(a)
    return a * s, s


def _silu_bwd(g, y, a, ctx):
    s = ctx
    return (g * (s + a * s * (1.0 - s)),)


_silu = register("silu", _silu_fwd, _silu_bwd, saves=True)

_GELU_C = np.sqrt(2.0 / np.pi)


def _gelu_fwd(a):
    # tanh approximation, written with in-place updates to limit temporaries
    th = a * a
    th *= _GELU_C * 0.044715
    th += _GELU_C
    th *= a
    np.tanh(th, out=th)
    y = th + 1.0
    y *= a
    y *= 0.5
    return y, th


def _gelu_bwd(g, y, a, ctx):
    th = ctx
    du = a * a
    du *= 3 * 0.044715 * _GELU_C
    du += _GELU_C
    sech2 = th * th
    np.subtract(1.0, sech2, out=sech2)
    du *= sech2
    du *= a
    du += th
    du += 1.0
    du *= 0.5
    du *= g
    return (du,)


_gelu = register("gelu", _gelu_fwd, _gelu_bwd, saves=True)


def silu(a) -> Tensor:
    return apply(_silu, (as_tensor(a),))


def gelu(a) -> Tensor:
    return apply(_gelu, (as_tensor(a),))


def _layernorm_fwd(a):
    c = a - a.mean(axis=-1, keepdims=True)
    var = np.einsum("...i,...i->...", c, c)[..., None]
    var *= 1.0 / a.shape[-1]
    var += LAYERNORM_EPS
    inv = 1.0 / np.sqrt(var)
    c *= inv
    return c, inv


def _layernorm_bwd(g, y, a, ctx):
    inv = ctx
    n = a.shape[-1]
    gm = g.sum(axis=-1, keepdims=True)
    gm *= 1.0 / n
    gy = np.einsum("...i,...i->...", g, y)[..., None]
    gy *= 1.0 / n
    out = y * gy
    np.subtract(g, out, out=out)
    out -= gm
    out *= inv
    return (out,)


_layernorm = register("layernorm", _layernorm_fwd, _layernorm_bwd, saves=True)


def layernorm(a) -> Tensor:
    """Normalize over the last axis; zero-variance rows map to zeros."""
    return apply(_layernorm, (as_tensor(a),))


def _cos_parts(a, b):
    na = np.sqrt((a * a).sum(axis=-1))
    nb = np.sqrt((b * b).sum(axis=-1))
    ok = (na > 0) & (nb > 0)
    denom = np.where(ok, na * nb, 1.0)
    return na, nb, ok, denom


def _cosine_fwd(a, b):
    na, nb, ok, denom = _cos_parts(a, b)
    return np.where(ok, (a * b).sum(axis=-1) / denom, 0.0)


def _cosine_bwd(g, y, a, b):
    na, nb, ok, denom = _cos_parts(a, b)
    safe_na = np.where(ok, na, 1.0)[..., None]
    safe_nb = np.where(ok, nb, 1.0)[..., None]
    gg = np.where(ok, g, 0.0)[..., None]
    yy = y[..., None]
    ga = gg * (b / (safe_na * safe_nb) - yy * a / safe_na**2)
    gb = gg * (a / (safe_na * safe_nb) - yy * b / safe_nb**2)
    return ga, gb


_cosine = register("cosine_sim", _cosine_fwd, _cosine_bwd)


def cosine_sim(a, b) -> Tensor:
    """Cosine similarity over the last axis; zero-norm rows give 0 with zero gradient."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_sim: incompatible shapes {a.shape} and {b.shape}")
    return apply(_cosine, (a, b))


# --------------------------------------------------------------------------
# gradient checking


def finite_diff_check(
    loss_fn: Callable[[list[Tensor]], Tensor],
    params: Sequence[np.ndarray],
    eps: float = 1e-5,
    max_coords: int | None = None,
    rng: np.random.Generator | None = None,
    atol: float = 1e-9,
) -> float:
    """Max relative error between tape gradients and central differences.

    Coordinates where the two agree to within ``atol`` are counted as exact:
    gradients that vanish identically (e.g. attention key biases) leave only
    differencing noise, for which a relative error is meaningless.

    ``loss_fn`` receives a list of tensors (tracked leaves during the analytic
    pass, constants during perturbation passes) and returns a scalar tensor.
    With ``max_coords`` set, that many coordinates are drawn uniformly across
    all parameters instead of checking every one.
    """
    if eps <= 0:
        raise DiffcoreError("eps must be positive")
    base = [np.array(p, dtype=np.float64) for p in params]

    def value(arrays):
        return loss_fn([Tensor(a) for a in arrays]).item()

    v0 = value(base)
    if value(base) != v0:
        raise DiffcoreError("loss_fn is not deterministic")

    with Tape() as tape:
        leaves = [tape.watch(a) for a in base]
        loss = loss_fn(leaves)
    grads = grad(loss, leaves)
    analytic = [grads[leaf].data for leaf in leaves]

    sizes = np.array([a.size for a in base])
    total = int(sizes.sum())
    flat_idx = np.arange(total)
    if max_coords is not None and max_coords < total:
        rng = rng or np.random.default_rng(0)
        flat_idx = np.sort(rng.choice(total, size=max_coords, replace=False))
    starts = np.concatenate([[0], np.cumsum(sizes)])
    owner = np.searchsorted(starts, flat_idx, side="right") - 1
    coords = [(int(i), int(k - starts[i])) for i, k in zip(owner, flat_idx)]

    worst = 0.0
    for i, j in coords:
        flat = base[i].reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        up = value(base)
        flat[j] = orig - eps
        down = value(base)
        flat[j] = orig
        numeric = (up - down) / (2 * eps)
        a = analytic[i].reshape(-1)[j]
        if abs(a - numeric) <= atol:
            continue
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-12)
        worst = max(worst, err)
    return worst


# --------------------------------------------------------------------------
# fused primitives used by the transformer; each has its own adjoint so the
# tape stays short


def _linear_fwd(x, w, b):
    y = x.reshape(-1, x.shape[-1]) @ w
    y += b
    return y.reshape(x.shape[:-1] + (w.shape[1],))


def _linear_bwd(g, y, x, w, b):
    g2 = g.reshape(-1, g.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    return (g2 @ w.T).reshape(x.shape), x2.T @ g2, g2.sum(axis=0)


_linear = register("linear", _linear_fwd, _linear_bwd)


def linear(x, w, b) -> Tensor:
    """x @ w + b over the last axis of x."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ShapeError(f"linear: incompatible shapes {x.shape}, {w.shape} and {b.shape}")
    return apply(_linear, (x, w, b))


def _modulate_fwd(x, shift, scale):
    xhat, inv = _layernorm_fwd(x)
    y = xhat * scale
    y += xhat
    y += shift
    return y, (xhat, inv)


def _modulate_bwd(g, y, x, shift, scale, ctx):
    xhat, inv = ctx
    gs = g * scale
    gs += g
    gx = _layernorm_bwd(gs, xhat, x, inv)[0]
    return gx, _unbroadcast(g, shift.shape), _unbroadcast(g * xhat, scale.shape)


_modulate = register("modulate", _modulate_fwd, _modulate_bwd, saves=True)


def modulate(x, shift, scale) -> Tensor:
    """layernorm(x) * (1 + scale) + shift."""
    x, shift, scale = as_tensor(x), as_tensor(shift), as_tensor(scale)
    _check_binary(x.shape, shift.shape, "modulate")
    _check_binary(x.shape, scale.shape, "modulate")
    return apply(_modulate, (x, shift, scale))


def _split_heads(qkv, heads):
    B, N, H3 = qkv.shape
    d = H3 // (3 * heads)
    parts = qkv.reshape(B, N, 3, heads, d).transpose(2, 0, 3, 1, 4)
    return parts[0], parts[1], parts[2], d


def _attn_probs(q, k, d):
    s = (q @ k.transpose(0, 1, 3, 2)) / np.sqrt(d)
    return _softmax_fwd(s)


def _attention_fwd(qkv, heads):
    q, k, v, d = _split_heads(qkv, heads)
    p = _attn_probs(q, k, d)
    o = p @ v
    B, h, N, _ = o.shape
    return o.transpose(0, 2, 1, 3).reshape(B, N, h * d), p


def _attention_bwd(g, y, qkv, heads, ctx):
    q, k, v, d = _split_heads(qkv, heads)
    p = ctx
    B, N, H = g.shape
    go = g.reshape(B, N, heads, d).transpose(0, 2, 1, 3)
    gv = p.transpose(0, 1, 3, 2) @ go
    gp = go @ v.transpose(0, 1, 3, 2)
    gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True)) / np.sqrt(d)
    gq = gs @ k
    gk = gs.transpose(0, 1, 3, 2) @ q
    out = np.stack([gq, gk, gv])  # [3, B, h, N, d]
    return (out.transpose(1, 3, 0, 2, 4).reshape(B, N, 3 * H),)


_attention = register("attention", _attention_fwd, _attention_bwd, saves=True)


def attention(qkv, heads: int) -> Tensor:
    """Multi-head softmax self-attention from packed [B, N, 3H] projections."""
    qkv = as_tensor(qkv)
    if qkv.ndim != 3 or qkv.shape[-1] % (3 * heads):
        raise ShapeError(f"attention: packed shape {qkv.shape} incompatible with {heads} heads")
    return apply(_attention, (qkv,), heads=int(heads))


def _block_fwd(h, m, wqkv, bqkv, wp, bp, w1, b1, w2, b2, heads):
    H = h.shape[-1]
    sh1, sc1, g1, sh2, sc2, g2 = (m[..., j * H : (j + 1) * H] for j in range(6))
    y1, c1 = _modulate_fwd(h, sh1, sc1)
    qkv = _linear_fwd(y1, wqkv, bqkv)
    a, c_att = _attention_fwd(qkv, heads)
    o = _linear_fwd(a, wp, bp)
    h1 = g1 * o
    h1 += h
    y2, c2 = _modulate_fwd(h1, sh2, sc2)
    u = _linear_fwd(y2, w1, b1)
    z, c_g = _gelu_fwd(u)
    r = _linear_fwd(z, w2, b2)
    out = g2 * r
    out += h1
    return out, (y1, c1, qkv, a, c_att, o, h1, y2, c2, u, z, c_g, r)


def _block_bwd(g, y, h, m, wqkv, bqkv, wp, bp, w1, b1, w2, b2, heads, ctx):
    y1, c1, qkv, a, c_att, o, h1, y2, c2, u, z, c_g, r = ctx
    H = h.shape[-1]
    sh1, sc1, g1, sh2, sc2, g2 = (m[..., j * H : (j + 1) * H] for j in range(6))
    # second residual branch: out = h1 + g2 * mlp(modulate(h1))
    gz, gw2, gb2 = _linear_bwd(g * g2, r, z, w2, b2)
    (gu,) = _gelu_bwd(gz, z, u, c_g)
    gy2, gw1, gb1 = _linear_bwd(gu, u, y2, w1, b1)
    gh1, gsh2, gsc2 = _modulate_bwd(gy2, y2, h1, sh2, sc2, c2)
    gh1 += g
    # first residual branch: h1 = h + g1 * proj(attention(qkv(modulate(h))))
    ga, gwp, gbp = _linear_bwd(gh1 * g1, o, a, wp, bp)
    (gqkv,) = _attention_bwd(ga, a, qkv, heads, c_att)
    gy1, gwqkv, gbqkv = _linear_bwd(gqkv, qkv, y1, wqkv, bqkv)
    gh, gsh1, gsc1 = _modulate_bwd(gy1, y1, h, sh1, sc1, c1)
    gh += gh1
    gm = np.concatenate([gsh1, gsc1, gh1 * o, gsh2, gsc2, g * r], axis=-1)
    return gh, gm, gwqkv, gbqkv, gwp, gbp, gw1, gb1, gw2, gb2


_block = register("adaln_block", _block_fwd, _block_bwd, saves=True)


def adaln_block(h, m, wqkv, bqkv, wp, bp, w1, b1, w2, b2, heads: int) -> Tensor:
    """One pre-norm transformer block with per-token adaptive modulation.

    ``m`` packs [shift1, scale1, gate1, shift2, scale2, gate2] along its last
    axis (6H wide, same leading shape as ``h``)::

        h1  = h  + gate1 * proj(attention(qkv(modulate(h, shift1, scale1))))
        out = h1 + gate2 * w2(gelu(w1(modulate(h1, shift2, scale2))))
    """
    args = tuple(as_tensor(x) for x in (h, m, wqkv, bqkv, wp, bp, w1, b1, w2, b2))
    h, m = args[0], args[1]
    H = h.shape[-1]
    if h.ndim != 3 or m.shape != h.shape[:-1] + (6 * H,):
        raise ShapeError(f"adaln_block: h {h.shape} and modulation {m.shape} incompatible")
    expect = [(H, 3 * H), (3 * H,), (H, H), (H,), (H, None), (None,), (None, H), (H,)]
    for t, shape in zip(args[2:], expect):
        if t.ndim != len(shape) or any(s is not None and s != d for s, d in zip(shape, t.shape)):
            raise ShapeError(f"adaln_block: weight of shape {t.shape} does not fit hidden width {H}")
    if H % heads:
        raise ShapeError(f"adaln_block: {heads} heads do not divide {H}")
    return apply(_block, args, heads=int(heads))
