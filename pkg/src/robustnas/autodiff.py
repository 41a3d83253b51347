"""Tape-based reverse-mode automatic differentiation over small dense arrays.

Every primitive writes one entry onto the active :class:`Tape` whenever one of
its inputs requires a gradient.  ``backward`` walks that tape once, in reverse,
and returns the gradient of a scalar root with respect to every recorded node.

Usage::

    with Tape() as tape:
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = sq_norm(x)
    grads = tape.gradient(y, [x])
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_node_ids = itertools.count()
_active_tapes: list["Tape"] = []
_isfinite = np.isfinite
_all = np.logical_and.reduce


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class Tensor:
    """A float64 array plus the bookkeeping needed to sit on a tape."""

    __slots__ = ("data", "requires_grad", "node_id")

    def __init__(self, data, requires_grad: bool = False, _check: bool = True):
        arr = np.asarray(data, dtype=np.float64)
        if _check and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in tensor of shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids) if requires_grad else None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar for the handful of ops used in model code
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __getitem__(self, index):
        return slice_(self, index)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Entry:
    kind: str
    inputs: tuple[int | None, ...]
    output: int
    backward: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]


class Tape:
    """Ordered record of primitive applications.

    Entries are appended in execution order, so inputs always precede their
    consumers and a reversed walk is a valid topological order.
    """

    def __init__(self):
        self.entries: list[_Entry] = []

    def __enter__(self) -> "Tape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        popped = _active_tapes.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self.entries)

    def gradient(self, root: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Gradients of ``root`` w.r.t. ``wrt``; unreached leaves get zeros."""
        grads = backward(self, root)
        return [
            grads[t.node_id] if t.node_id in grads else np.zeros_like(t.data)
            for t in wrt
        ]


def backward(tape: Tape, root: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep over ``tape``; returns ``node_id -> gradient`` of ``root``."""
    if root.data.size != 1 or root.data.ndim > 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    grads: dict[int, np.ndarray] = {}
    if root.node_id is None:
        return grads
    grads[root.node_id] = np.ones_like(root.data)
    for entry in reversed(tape.entries):
        g_out = grads.get(entry.output)
        if g_out is None:
            continue
        for nid, g in zip(entry.inputs, entry.backward(g_out)):
            if nid is None or g is None:
                continue
            if nid in grads:
                grads[nid] = grads[nid] + g
            else:
                grads[nid] = g
    return grads


def _record(kind: str, inputs: Sequence[Tensor], out_data: np.ndarray, rule,
            bounded: bool = False) -> Tensor:
    # bounded ops map finite inputs to finite outputs, and every input is
    # finite by induction, so only the others need the check
    if not bounded and not _all(_isfinite(out_data), axis=None):
        raise NonFiniteError(f"{kind} produced non-finite output")
    needs = False
    for t in inputs:
        if t.requires_grad:
            needs = True
            break
    if type(out_data) is not np.ndarray:  # 0-d arithmetic yields numpy scalars
        out_data = np.asarray(out_data, dtype=np.float64)
    # op outputs are float64 already; skip the checks in __init__
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = needs
    out.node_id = next(_node_ids) if needs else None
    if needs:
        if not _active_tapes:
            raise RuntimeError(f"{kind}: input requires grad but no tape is active")
        ids = tuple(t.node_id if t.requires_grad else None for t in inputs)
        _active_tapes[-1].entries.append(_Entry(kind, ids, out.node_id, rule))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> None:
    sa, sb = a.data.shape, b.data.shape
    # fast paths: equal shapes, a scalar, or a bias row over the last axis
    if sa == sb or not sa or not sb or (len(sb) == 1 and sa[-1] == sb[0]):
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not conform") from None


# -- primitives ---------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("add", a, b)
    sa, sb = a.data.shape, b.data.shape
    return _record("add", (a, b), a.data + b.data,
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("sub", a, b)
    sa, sb = a.data.shape, b.data.shape
    return _record("sub", (a, b), a.data - b.data,
                   lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record("mul", (a, b), ad * bd,
                   lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return _record("matmul", (a, b), ad @ bd, lambda g: (g @ bd.T, ad.T @ g))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _record("tanh", (a,), y, lambda g: (g * (1.0 - y * y),), bounded=True)


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return _record("relu", (a,), np.where(pos, a.data, 0.0), lambda g: (g * pos,), bounded=True)


def _softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    y = _softmax(a.data)

    def rule(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", (a,), y, rule, bounded=True)


def log_softmax(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    p = np.exp(y)
    return _record("log_softmax", (a,), y,
                   lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under ``logits`` (n x C)."""
    labels = np.asarray(labels, dtype=np.intp)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(
            f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    x = logits.data
    shifted = x - x.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    n = x.shape[0]
    rows = np.arange(n)
    loss = np.mean(logz - shifted[rows, labels])

    def rule(g):
        p = np.exp(shifted - logz[:, None])
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return _record("cross_entropy", (logits,), np.asarray(loss), rule)


def mean(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _record("mean", (a,), np.asarray(a.data.mean()),
                   lambda g: (np.full(shape, g / n),))


def sum_(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", (a,), np.asarray(a.data.sum()),
                   lambda g: (np.full(shape, g * 1.0),))


def scale(a: Tensor, c: float) -> Tensor:
    return _record("scale", (a,), a.data * c, lambda g: (g * c,))


def sq_norm(a: Tensor) -> Tensor:
    d = a.data
    return _record("sq_norm", (a,), np.asarray(np.sum(d * d)), lambda g: (2.0 * g * d,))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _record("concat", tuple(tensors), out,
                   lambda g: tuple(np.split(g, bounds, axis=axis)))


def slice_(a: Tensor, index) -> Tensor:
    shape = a.shape
    try:
        out = a.data[index]
    except IndexError as err:
        raise ShapeError(f"slice: index {index!r} invalid for shape {shape}") from err

    basic = isinstance(index, (int, slice)) or (
        isinstance(index, tuple) and all(isinstance(i, (int, slice)) for i in index))

    def rule(g):
        full = np.zeros(shape)
        if basic:
            # basic indexing never repeats a position
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _record("slice", (a,), np.array(out, dtype=np.float64), rule, bounded=True)


def mask(a: Tensor, m) -> Tensor:
    """Elementwise product with a constant (non-differentiable) mask."""
    m = np.asarray(m, dtype=np.float64)
    try:
        out = a.data * m
    except ValueError:
        raise ShapeError(f"mask: tensor {a.shape} vs mask {m.shape}") from None
    if out.shape != a.shape:
        raise ShapeError(f"mask: mask {m.shape} would broadcast tensor {a.shape}")
    return _record("mask", (a,), out, lambda g: (g * m,))


PRIMITIVES = {
    "add": add, "sub": sub, "mul": mul, "matmul": matmul, "tanh": tanh,
    "relu": relu, "softmax": softmax, "log_softmax": log_softmax,
    "cross_entropy": cross_entropy, "mean": mean, "sum": sum_, "scale": scale,
    "sq_norm": sq_norm, "concat": concat, "slice": slice_, "mask": mask,
}


def apply_primitive(kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    return fn(*inputs, **kwargs)


# -- finite-difference checking -----------------------------------------------

def value_and_grad(f: Callable[..., Tensor], arrays: Sequence[np.ndarray]):
    """Evaluate scalar ``f`` on fresh leaves and return (value, grads)."""
    with Tape() as tape:
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = f(*leaves)
    return out.item(), tape.gradient(out, leaves)


def fd_step(x: np.ndarray, rel: float = 1e-5) -> np.ndarray:
    return rel * np.maximum(1.0, np.abs(x))


def grad_check(f: Callable[..., Tensor], point: Sequence, h: float | None = None) -> float:
    """Max relative error between autodiff and central differences.

    ``h`` is a fixed step; by default each coordinate uses 1e-5 * max(1, |x_i|).
    Error per coordinate is |analytic - numeric| / max(1, |numeric|).
    """
    arrays = [np.array(p, dtype=np.float64) for p in point]
    _, analytic = value_and_grad(f, arrays)

    def evaluate():
        # the point was validated above and perturbations stay finite
        val = f(*[Tensor(a, _check=False) for a in arrays]).item()
        if not np.isfinite(val):
            raise NonFiniteError("grad_check: non-finite function value")
        return val

    worst = 0.0
    for k, arr in enumerate(arrays):
        steps = fd_step(arr) if h is None else np.full(arr.shape, float(h))
        for idx in np.ndindex(arr.shape):
            step = steps[idx]
            orig = arr[idx]
            arr[idx] = orig + step
            plus = evaluate()
            arr[idx] = orig - step
            minus = evaluate()
            arr[idx] = orig
            numeric = (plus - minus) / (2.0 * step)
            err = abs(analytic[k][idx] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
