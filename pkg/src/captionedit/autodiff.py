"""Dense float64 tensors with a dynamic reverse-mode gradient tape.

Every forward op returns a new :class:`Tensor`; when any input requires a
gradient the output remembers its parents, the op name and whatever the
backward rule needs.  :func:`backward` orders the reachable nodes by creation
sequence (a valid topological order, since parents are always created before
children) and visits each node once in reverse.

Backward rules live in the module-level ``BACKWARD`` registry keyed by op
name so that tests can inject faults into a single op.

Broadcasting is deliberately narrow: elementwise ops accept equal shapes or a
scalar operand.  The few structured broadcasts the models need (bias add,
attention over a key axis) are explicit ops with their own backward rules.
"""

from __future__ import annotations

import itertools
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor", "ShapeError", "NonFiniteError", "BACKWARD",
    "tensor", "parameter", "no_grad", "is_grad_enabled", "backward", "build_tape",
    "add", "sub", "mul", "neg", "matmul", "linear", "concat", "stack", "index",
    "embedding", "pick", "expand", "weighted_sum", "tanh", "sigmoid", "exp", "log",
    "softmax", "log_softmax", "sum", "mean", "squared_difference", "stop_gradient",
    "finite_diff_check", "gradient_report", "GradReport", "SkipCoordinate",
]


class ShapeError(ValueError):
    pass


class NonFiniteError(ValueError):
    pass


class SkipCoordinate(Exception):
    """Raised by a checked function when a perturbation leaves its valid region."""


_seq = itertools.count()
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextmanager
def no_grad():
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{what}: non-finite values")


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "op", "parents", "ctx", "seq", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, name or "tensor")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.op: str | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.ctx = None
        self.seq = next(_seq)
        self.name = name

    @classmethod
    def _node(cls, data: np.ndarray, op: str, parents: tuple, ctx=None) -> "Tensor":
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.seq = next(_seq)
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = track
        if track:
            out.op = op
            out.parents = parents
            out.ctx = ctx
        else:
            out.op = None
            out.parents = ()
            out.ctx = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

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

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a python scalar")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad=requires_grad)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


BACKWARD: dict[str, Callable] = {}


def _rule(name):
    def deco(fn):
        BACKWARD[name] = fn
        return fn
    return deco


# ---------------------------------------------------------------------------
# elementwise arithmetic

def _binary_shapes(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.asarray(g.sum()).reshape(shape)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("add", a, b)
    return Tensor._node(a.data + b.data, "add", (a, b))


@_rule("add")
def _add_bw(g, out, ctx):
    a, b = out.parents
    return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("sub", a, b)
    return Tensor._node(a.data - b.data, "sub", (a, b))


@_rule("sub")
def _sub_bw(g, out, ctx):
    a, b = out.parents
    return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("mul", a, b)
    return Tensor._node(a.data * b.data, "mul", (a, b))


@_rule("mul")
def _mul_bw(g, out, ctx):
    a, b = out.parents
    return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return Tensor._node(-a.data, "neg", (a,))


@_rule("neg")
def _neg_bw(g, out, ctx):
    return (-g,)


def squared_difference(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes("squared_difference", a, b)
    d = a.data - b.data
    return Tensor._node(d * d, "squared_difference", (a, b), d)


@_rule("squared_difference")
def _sqdiff_bw(g, out, ctx):
    a, b = out.parents
    gd = 2.0 * g * ctx
    return _unbroadcast(gd, a.shape), _unbroadcast(-gd, b.shape)


# ---------------------------------------------------------------------------
# linear algebra and structure

def matmul(a, b) -> Tensor:
    """``a[..., k] @ b[k, m]`` (or ``b[k]``); the right operand is a matrix or vector."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 1 or b.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    return Tensor._node(a.data @ b.data, "matmul", (a, b))


@_rule("matmul")
def _matmul_bw(g, out, ctx):
    a, b = out.parents
    k = b.shape[0]
    if b.ndim == 1:
        ga = g[..., None] * b.data
        gb = a.data.reshape(-1, k).T @ g.reshape(-1)
    else:
        ga = g @ b.data.T
        gb = a.data.reshape(-1, k).T @ g.reshape(-1, b.shape[1])
    return ga, gb


def linear(x, w, b=None) -> Tensor:
    """Affine map ``x @ w + b`` with ``b`` broadcast over all leading axes."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2 or x.ndim < 1 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not conform to weight {w.shape}")
    out = x.data @ w.data
    if b is None:
        return Tensor._node(out, "linear", (x, w))
    b = _as_tensor(b)
    if b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    return Tensor._node(out + b.data, "linear", (x, w, b))


@_rule("linear")
def _linear_bw(g, out, ctx):
    x, w = out.parents[:2]
    gx = g @ w.data.T
    gw = x.data.reshape(-1, w.shape[0]).T @ g.reshape(-1, w.shape[1])
    if len(out.parents) == 2:
        return gx, gw
    return gx, gw, g.reshape(-1, w.shape[1]).sum(axis=0)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    ax = axis % ts[0].ndim
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or any(s != r for i, (s, r) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} do not conform on axis {axis}")
    sizes = [t.shape[ax] for t in ts]
    return Tensor._node(np.concatenate([t.data for t in ts], axis=ax), "concat", ts, (ax, sizes))


@_rule("concat")
def _concat_bw(g, out, ctx):
    ax, sizes = ctx
    return tuple(np.split(g, np.cumsum(sizes)[:-1], axis=ax))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = tuple(_as_tensor(t) for t in tensors)
    if not ts:
        raise ShapeError("stack: no inputs")
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: shapes {[t.shape for t in ts]} differ")
    return Tensor._node(np.stack([t.data for t in ts], axis=axis), "stack", ts, axis)


@_rule("stack")
def _stack_bw(g, out, ctx):
    n = len(out.parents)
    return tuple(np.take(g, i, axis=ctx) for i in range(n))


def index(x, key) -> Tensor:
    """Basic or integer-array indexing; backward scatters with accumulation."""
    x = _as_tensor(x)
    try:
        data = x.data[key]
    except IndexError as e:
        raise ShapeError(f"index: {e} for shape {x.shape}") from None
    return Tensor._node(np.array(data, dtype=np.float64), "index", (x,), key)


@_rule("index")
def _index_bw(g, out, ctx):
    (x,) = out.parents
    gx = np.zeros_like(x.data)
    np.add.at(gx, ctx, g)
    return (gx,)


def embedding(weight, ids) -> Tensor:
    """Row gather ``weight[ids]``; ids may have any shape."""
    weight = _as_tensor(weight)
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError(f"embedding: weight must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding: ids out of range for table {weight.shape}")
    return Tensor._node(weight.data[ids], "embedding", (weight,), ids)


@_rule("embedding")
def _embedding_bw(g, out, ctx):
    (w,) = out.parents
    gw = np.zeros_like(w.data)
    np.add.at(gw, ctx.reshape(-1), g.reshape(-1, w.shape[1]))
    return (gw,)


def pick(x, ids) -> Tensor:
    """``x[..., ids]`` taking one entry of the last axis per leading position."""
    x = _as_tensor(x)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.shape != x.shape[:-1]:
        raise ShapeError(f"pick: ids {ids.shape} do not match leading shape of {x.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= x.shape[-1]):
        raise ShapeError(f"pick: ids out of range for last axis {x.shape[-1]}")
    out = np.take_along_axis(x.data, ids[..., None], axis=-1)[..., 0]
    return Tensor._node(out, "pick", (x,), ids)


@_rule("pick")
def _pick_bw(g, out, ctx):
    (x,) = out.parents
    gx = np.zeros_like(x.data)
    np.put_along_axis(gx, ctx[..., None], g[..., None], axis=-1)
    return (gx,)


def expand(x, axis: int, n: int) -> Tensor:
    """Insert a new axis of length ``n`` by repetition."""
    x = _as_tensor(x)
    ax = axis % (x.ndim + 1)
    data = np.repeat(np.expand_dims(x.data, ax), n, axis=ax)
    return Tensor._node(data, "expand", (x,), ax)


@_rule("expand")
def _expand_bw(g, out, ctx):
    return (g.sum(axis=ctx),)


def weighted_sum(weights, values) -> Tensor:
    """Contract ``weights[..., n]`` with ``values[..., n, h]`` into ``[..., h]``."""
    w, v = _as_tensor(weights), _as_tensor(values)
    if v.ndim != w.ndim + 1 or v.shape[:-1] != w.shape:
        raise ShapeError(f"weighted_sum: weights {w.shape} do not match values {v.shape}")
    out = np.einsum("...n,...nh->...h", w.data, v.data)
    return Tensor._node(out, "weighted_sum", (w, v))


@_rule("weighted_sum")
def _wsum_bw(g, out, ctx):
    w, v = out.parents
    gw = np.einsum("...h,...nh->...n", g, v.data)
    gv = w.data[..., None] * g[..., None, :]
    return gw, gv


# ---------------------------------------------------------------------------
# nonlinearities

def tanh(x) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.data)
    return Tensor._node(y, "tanh", (x,), y)


@_rule("tanh")
def _tanh_bw(g, out, ctx):
    return (g * (1.0 - ctx * ctx),)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |z|
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    y = _sigmoid(x.data)
    return Tensor._node(y, "sigmoid", (x,), y)


@_rule("sigmoid")
def _sigmoid_bw(g, out, ctx):
    return (g * ctx * (1.0 - ctx),)


def exp(x) -> Tensor:
    x = _as_tensor(x)
    y = np.exp(x.data)
    return Tensor._node(y, "exp", (x,), y)


@_rule("exp")
def _exp_bw(g, out, ctx):
    return (g * ctx,)


def log(x) -> Tensor:
    x = _as_tensor(x)
    if (x.data <= 0).any():
        raise NonFiniteError("log: non-positive input")
    return Tensor._node(np.log(x.data), "log", (x,))


@_rule("log")
def _log_bw(g, out, ctx):
    return (g / out.parents[0].data,)


def _check_mask(x: Tensor, mask, op: str):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.shape:
        raise ShapeError(f"{op}: mask {mask.shape} does not match input {x.shape}")
    if not mask.any(axis=-1).all():
        raise ShapeError(f"{op}: a row has no unmasked entries")
    return mask


def softmax(x, mask=None) -> Tensor:
    """Softmax over the last axis; entries where ``mask`` is False get exactly 0."""
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax: empty input of shape {x.shape}")
    mask = _check_mask(x, mask, "softmax")
    z = x.data if mask is None else np.where(mask, x.data, -np.inf)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    y = e / e.sum(axis=-1, keepdims=True)
    return Tensor._node(y, "softmax", (x,), y)


@_rule("softmax")
def _softmax_bw(g, out, ctx):
    y = ctx
    return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)


def log_softmax(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError(f"log_softmax: empty input of shape {x.shape}")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return Tensor._node(y, "log_softmax", (x,), y)


@_rule("log_softmax")
def _log_softmax_bw(g, out, ctx):
    p = np.exp(ctx)
    return (g - p * g.sum(axis=-1, keepdims=True),)


# ---------------------------------------------------------------------------
# reductions and gradient control

def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = _as_tensor(x)
    return Tensor._node(np.asarray(x.data.sum(axis=axis)), "sum", (x,), axis)


@_rule("sum")
def _sum_bw(g, out, ctx):
    (x,) = out.parents
    if ctx is not None:
        g = np.expand_dims(g, ctx)
    return (np.broadcast_to(g, x.shape).copy(),)


def mean(x, axis=None) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return Tensor._node(np.asarray(x.data.mean(axis=axis)), "mean", (x,), (axis, n))


@_rule("mean")
def _mean_bw(g, out, ctx):
    (x,) = out.parents
    axis, n = ctx
    if axis is not None:
        g = np.expand_dims(g, axis)
    return (np.broadcast_to(g / n, x.shape).copy(),)


def stop_gradient(x) -> Tensor:
    """Same values, no backward contribution."""
    x = _as_tensor(x)
    return Tensor(x.data.copy())


# ---------------------------------------------------------------------------
# backward pass

def build_tape(root: Tensor) -> list[Tensor]:
    """All tracked nodes reachable from ``root``, in execution order."""
    seen: set[int] = set()
    nodes: list[Tensor] = []
    stack_ = [root]
    while stack_:
        t = stack_.pop()
        if id(t) in seen or not t.requires_grad:
            continue
        seen.add(id(t))
        nodes.append(t)
        stack_.extend(t.parents)
    nodes.sort(key=lambda t: t.seq)
    return nodes


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ValueError("backward: loss does not depend on any parameter")
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        pgrads = BACKWARD[node.op](g, node, node.ctx)
        for p, pg in zip(node.parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            k = id(p)
            if k in grads:
                grads[k] = grads[k] + pg
            else:
                grads[k] = pg


# ---------------------------------------------------------------------------
# finite differences

@dataclass
class GradReport:
    max_error: float = 0.0
    checked: int = 0
    skipped: int = 0
    unresolved: int = 0
    worst: tuple[str, int] | None = None
    per_param: dict[str, float] = field(default_factory=dict)


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    if isinstance(params, Tensor):
        return [(params.name or "p0", params)]
    return [(p.name or f"p{i}", p) for i, p in enumerate(params)]


def gradient_report(f: Callable[[], Tensor], params, eps: float = 1e-5,
                    coords: Mapping[str, Iterable[int]] | None = None,
                    resolution: float = 0.0) -> GradReport:
    """Compare backward() gradients of ``f`` against central differences.

    ``f`` must be deterministic; it may raise :class:`SkipCoordinate` during a
    perturbed evaluation, in which case that coordinate is skipped and counted.
    ``coords`` optionally restricts the flat coordinates checked per parameter.
    Coordinates where both gradients are below ``resolution`` in magnitude are
    counted as ``unresolved`` instead of scored.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    named = _named(params)
    for _, p in named:
        p.grad = None
    loss = f()
    backward(loss)
    analytic = {n: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for n, p in named}
    base = float(loss.data)
    with no_grad():
        again = float(f().data)
    if again != base:
        raise ValueError(f"function is not deterministic: {base!r} != {again!r}")

    rep = GradReport()
    for n, p in named:
        flat = p.data.reshape(-1)
        an = analytic[n].reshape(-1)
        worst = 0.0
        idxs = range(flat.size) if coords is None or n not in coords else coords[n]
        for i in idxs:
            orig = flat[i]
            try:
                with no_grad():
                    flat[i] = orig + eps
                    fp = float(f().data)
                    flat[i] = orig - eps
                    fm = float(f().data)
            except SkipCoordinate:
                rep.skipped += 1
                continue
            finally:
                flat[i] = orig
            num = (fp - fm) / (2.0 * eps)
            if abs(an[i]) < resolution and abs(num) < resolution:
                rep.unresolved += 1
                continue
            err = abs(an[i] - num) / max(1e-8, abs(an[i]) + abs(num))
            rep.checked += 1
            worst = max(worst, err)
            if rep.worst is None or err > rep.max_error:
                rep.max_error = err
                rep.worst = (n, i)
        rep.per_param[n] = worst
    for _, p in named:
        p.grad = None
    return rep


def finite_diff_check(f: Callable[[], Tensor], params, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients."""
    return gradient_report(f, params, eps).max_error
