"""Dense float64 tensors with a tape for reverse-mode differentiation.

Operations record themselves on a :class:`Tape` whenever one of their inputs
is tracked (``requires_grad=True``). Leaves (parameters, inputs) are not bound
to a tape, so the same parameter tensors can be reused by a fresh tape on every
training step::

    with Tape() as tape:
        loss = ebmmoe.tensor.sum(x @ w)
    tape.backward(loss)          # writes w.grad

Broadcasting is limited to scalar operands and a row-vector bias added to a
matrix.
"""
from __future__ import annotations

import contextvars
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, DomainError, NonFiniteError

_ACTIVE_TAPE: contextvars.ContextVar = contextvars.ContextVar("ebmmoe_tape", default=None)
_GRAD_ENABLED: contextvars.ContextVar = contextvars.ContextVar("ebmmoe_grad", default=True)

LOG_2PI = float(np.log(2.0 * np.pi))


class Tensor:
    """A dense real array, optionally tracked for differentiation."""

    __slots__ = ("values", "grad", "requires_grad", "tape", "node_id", "__weakref__")
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False):
        arr = np.array(values, dtype=np.float64)
        self.values = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.tape = None
        self.node_id = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool = False) -> "Tensor":
        t = cls.__new__(cls)
        t.values = arr
        t.grad = None
        t.requires_grad = requires_grad
        t.tape = None
        t.node_id = None
        return t

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float(self.values)

    def numpy(self) -> np.ndarray:
        return self.values

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.values.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.values!r}{flag})"

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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


@dataclass
class Record:
    """One primitive application: ``op`` mapped ``inputs`` to ``output``.

    ``backward(g, needs)`` returns one gradient (or ``None``) per input given
    the output adjoint ``g``; ``needs[k]`` says whether input ``k`` wants one.
    Forward values needed by the backward rule live in its closure.
    """

    op: str
    inputs: tuple
    output: int
    backward: Callable


class Tape:
    """Ordered record of primitive operations (a Wengert list).

    Records are appended as operations execute, so they are always in
    topological order and the induced graph is acyclic.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.tensors: list[Tensor] = []
        self._leaf_nodes: dict[int, int] = {}
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.records)

    def _node(self, t: Tensor):
        if not t.requires_grad:
            return None
        if t.tape is self:
            return t.node_id
        if t.tape is not None:
            raise ContractError("tensor belongs to a different tape")
        key = id(t)
        nid = self._leaf_nodes.get(key)
        if nid is None:
            nid = len(self.tensors)
            self.tensors.append(t)
            self._leaf_nodes[key] = nid
        return nid

    def _append(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward) -> None:
        ids = tuple(self._node(t) for t in inputs)
        nid = len(self.tensors)
        self.tensors.append(out)
        out.tape = self
        out.node_id = nid
        self.records.append(Record(op, ids, nid, backward))

    def _adjoints(self, output: Tensor, wanted: set | None):
        if output.tape is not self:
            if output.requires_grad and output.tape is None:
                raise ContractError("output is a leaf; nothing was recorded")
            raise ContractError("output was not recorded on this tape")
        if output.size != 1:
            raise ContractError(f"backward needs a scalar output, got shape {output.shape}")
        n = len(self.tensors)
        live = None
        if wanted is not None:
            live = [False] * n
            for nid in wanted:
                live[nid] = True
            for rec in self.records:
                if not live[rec.output]:
                    live[rec.output] = any(i is not None and live[i] for i in rec.inputs)
        adj: list = [None] * n
        adj[output.node_id] = np.ones_like(output.values)
        for rec in reversed(self.records[: self._record_index(output) + 1]):
            g = adj[rec.output]
            if g is None:
                continue
            if live is None:
                needs = tuple(i is not None for i in rec.inputs)
            else:
                needs = tuple(i is not None and live[i] for i in rec.inputs)
            if not any(needs):
                continue
            with np.errstate(over="ignore", invalid="ignore"):  # callers check gradients for finiteness
                grads = rec.backward(g, needs)
            for nid, gi, need in zip(rec.inputs, grads, needs):
                if not need or gi is None:
                    continue
                adj[nid] = gi if adj[nid] is None else adj[nid] + gi
        return adj

    def _record_index(self, output: Tensor) -> int:
        # outputs are appended in order, so bisect on output node id
        lo, hi = 0, len(self.records) - 1
        target = output.node_id
        while lo <= hi:
            mid = (lo + hi) // 2
            o = self.records[mid].output
            if o == target:
                return mid
            if o < target:
                lo = mid + 1
            else:
                hi = mid - 1
        raise ContractError("output has no record on this tape")

    def backward(self, output: Tensor) -> None:
        """Accumulate d(output)/d(t) into ``t.grad`` for every tracked tensor on the tape."""
        adj = self._adjoints(output, None)
        for t, a in zip(self.tensors, adj):
            if a is None:
                continue
            a = np.broadcast_to(a, t.shape)
            t.grad = np.array(a, dtype=np.float64) if t.grad is None else t.grad + a

    def grad(self, output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
        """Return d(output)/d(w) for each ``w`` without touching any ``.grad`` field."""
        ids = []
        for w in wrt:
            nid = self._leaf_nodes.get(id(w)) if w.tape is None else (w.node_id if w.tape is self else None)
            ids.append(nid)
        adj = self._adjoints(output, {i for i in ids if i is not None})
        out = []
        for w, nid in zip(wrt, ids):
            a = None if nid is None else adj[nid]
            out.append(np.zeros(w.shape) if a is None else np.array(np.broadcast_to(a, w.shape)))
        return out


def backward(output: Tensor, tape: Tape | None = None) -> None:
    """Module-level form of :meth:`Tape.backward`; defaults to the output's own tape."""
    tape = tape if tape is not None else output.tape
    if tape is None:
        raise ContractError("output is not tracked by any tape")
    tape.backward(output)


def grad(output: Tensor, wrt: Sequence[Tensor], tape: Tape | None = None) -> list[np.ndarray]:
    tape = tape if tape is not None else output.tape
    if tape is None:
        return [np.zeros(w.shape) for w in wrt]
    return tape.grad(output, wrt)


@contextmanager
def no_grad():
    """Evaluate without recording anything, even for tracked inputs."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def _check_finite(op: str, arr: np.ndarray) -> None:
    if not np.isfinite(arr).all():
        row = None
        if arr.ndim >= 1:
            bad = ~np.isfinite(arr.reshape(arr.shape[0], -1)).all(axis=1) if arr.ndim > 1 else ~np.isfinite(arr)
            row = int(np.flatnonzero(bad)[0])
        raise NonFiniteError(op, row)


def _emit(op: str, inputs: Sequence[Tensor], values: np.ndarray, backward) -> Tensor:
    _check_finite(op, values)
    if not _GRAD_ENABLED.get():
        return Tensor._wrap(values)
    tape = _ACTIVE_TAPE.get()
    if tape is None or not any(t.requires_grad for t in inputs):
        return Tensor._wrap(values)
    for t in inputs:
        if t.requires_grad and t.tape is not None and t.tape is not tape:
            raise ContractError("inputs were recorded on different tapes")
    out = Tensor._wrap(values, requires_grad=True)
    tape._append(op, inputs, out, backward)
    return out


def _broadcast_kind(op: str, a: tuple, b: tuple) -> None:
    if a == b or a == () or b == ():
        return
    if len(a) == 2 and len(b) == 1 and a[1] == b[0]:
        return
    if len(b) == 2 and len(a) == 1 and b[1] == a[0]:
        return
    raise DimensionError(f"{op}: incompatible shapes {a} and {b}")


def _reduce_to(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape == ():
        return np.asarray(g.sum())
    return g.sum(axis=0)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind("add", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def back(g, needs):
        return (_reduce_to(g, sa) if needs[0] else None, _reduce_to(g, sb) if needs[1] else None)

    return _emit("add", (a, b), a.values + b.values, back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind("sub", a.shape, b.shape)
    sa, sb = a.shape, b.shape

    def back(g, needs):
        return (_reduce_to(g, sa) if needs[0] else None, _reduce_to(-g, sb) if needs[1] else None)

    return _emit("sub", (a, b), a.values - b.values, back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_kind("mul", a.shape, b.shape)
    av, bv = a.values, b.values

    def back(g, needs):
        return (
            _reduce_to(g * bv, av.shape) if needs[0] else None,
            _reduce_to(g * av, bv.shape) if needs[1] else None,
        )

    return _emit("mul", (a, b), av * bv, back)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.values)

    def back(g, needs):
        return (g * (1.0 - y * y),)

    return _emit("tanh", (x,), y, back)


def _softplus_parts(xv: np.ndarray):
    e = np.exp(-np.abs(xv))
    y = np.maximum(xv, 0.0) + np.log1p(e)
    inv = 1.0 / (1.0 + e)
    slope = np.where(xv >= 0.0, inv, e * inv)
    return y, slope


def softplus(x) -> Tensor:
    x = as_tensor(x)
    y, slope = _softplus_parts(x.values)

    def back(g, needs):
        return (g * slope,)

    return _emit("softplus", (x,), y, back)


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0.0

    def back(g, needs):
        return (g * mask,)

    return _emit("relu", (x,), np.where(mask, x.values, 0.0), back)


def exp(x) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):  # overflow surfaces as NonFiniteError below
        y = np.exp(x.values)

    def back(g, needs):
        return (g * y,)

    return _emit("exp", (x,), y, back)


def square(x) -> Tensor:
    x = as_tensor(x)
    return mul(x, x)


_ACTIVATIONS = {"tanh": tanh, "softplus": softplus, "relu": relu, "square": square, "identity": lambda x: x}


def activation(x, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(as_tensor(x))


# ------------------------------------------------------------------ linear


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def back(g, needs):
        return (g @ bv.T if needs[0] else None, av.T @ g if needs[1] else None)

    return _emit("matmul", (a, b), av @ bv, back)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {x.shape}")

    def back(g, needs):
        return (g.T,)

    return _emit("transpose", (x,), x.values.T, back)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    src = x.shape
    try:
        y = x.values.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {src} as {tuple(shape)}") from None

    def back(g, needs):
        return (g.reshape(src),)

    return _emit("reshape", (x,), y, back)


def stack(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise DimensionError(f"stack: mismatched shapes {sorted(shapes)}")
    y = np.stack([x.values for x in xs], axis=axis)

    def back(g, needs):
        parts = np.moveaxis(g, axis, 0)
        return tuple(parts[k] if needs[k] else None for k in range(len(xs)))

    return _emit("stack", tuple(xs), y, back)


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        y = np.concatenate([x.values for x in xs], axis=axis)
    except ValueError:
        raise DimensionError(f"concat: incompatible shapes {[x.shape for x in xs]}") from None
    edges = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def back(g, needs):
        parts = np.split(g, edges, axis=axis)
        return tuple(p if n else None for p, n in zip(parts, needs))

    return _emit("concat", tuple(xs), y, back)


# --------------------------------------------------------------- reductions


def sum(x, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    shape = x.shape

    def back(g, needs):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _emit("sum", (x,), np.asarray(x.values.sum(axis=axis)), back)


def mean(x, axis=None) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    count = x.size if axis is None else shape[axis]

    def back(g, needs):
        if axis is None:
            return (np.broadcast_to(g / count, shape),)
        return (np.broadcast_to(np.expand_dims(g / count, axis), shape),)

    return _emit("mean", (x,), np.asarray(x.values.mean(axis=axis)), back)


def logsumexp(x, axis: int = -1, average: bool = False) -> Tensor:
    """``log sum exp`` along ``axis`` (``log mean exp`` when ``average``).

    Terms are summed in sorted order, so the result is bitwise invariant under
    permutation along ``axis``.
    """
    x = as_tensor(x)
    xv = x.values
    top = xv.max(axis=axis, keepdims=True)
    total = np.exp(np.sort(xv, axis=axis) - top).sum(axis=axis, keepdims=True)
    count = xv.shape[axis]
    inner = total / count if average else total
    y = np.squeeze(top + np.log(inner), axis=axis)
    weights = np.exp(xv - top) / total

    def back(g, needs):
        return (np.expand_dims(g, axis) * weights,)

    return _emit("logsumexp", (x,), y, back)


# ------------------------------------------------------------------ density


def gaussian_log_density(x, mean, diag_var) -> Tensor:
    """Diagonal-Gaussian log density, summed over the last axis.

    Vectors give a scalar; ``[batch x d]`` inputs give one value per row.
    """
    x, mu, var = as_tensor(x), as_tensor(mean), as_tensor(diag_var)
    if not (x.shape == mu.shape == var.shape):
        raise DimensionError(
            f"gaussian_log_density: shapes x{x.shape}, mean{mu.shape}, var{var.shape} differ"
        )
    v = var.values
    if not (v > 0.0).all():
        raise DomainError("gaussian_log_density: variances must be positive")
    r = x.values - mu.values
    inv = 1.0 / v
    y = np.asarray(-0.5 * (LOG_2PI + np.log(v) + r * r * inv).sum(axis=-1))

    def back(g, needs):
        ge = np.expand_dims(g, -1)
        rv = r * inv
        gx = -ge * rv if (needs[0] or needs[1]) else None
        gvar = ge * 0.5 * (rv * rv - inv) if needs[2] else None
        return (gx if needs[0] else None, -gx if needs[1] else None, gvar)

    return _emit("gaussian_log_density", (x, mu, var), y, back)


# ------------------------------------------------------------------- oracle


def finite_difference_check(f: Callable[[Tensor], Tensor], point, h: float = 1e-5) -> float:
    """Largest relative gap between tape and central-difference gradients of ``f`` at ``point``.

    The denominator per coordinate is ``max(|analytic|, |numeric|, 1e-8)``.
    """
    base = np.array(as_tensor(point).values, dtype=np.float64)
    p = Tensor(base, requires_grad=True)
    with Tape() as tape:
        out = f(p)
    if out.requires_grad and out.tape is tape:
        analytic = tape.grad(out, [p])[0].reshape(-1)
    else:
        analytic = np.zeros(base.size)
    numeric = np.empty(base.size)
    flat = base.reshape(-1)
    with no_grad():
        for k in range(flat.size):
            probe = flat.copy()
            probe[k] = flat[k] + h
            up = float(f(Tensor._wrap(probe.reshape(base.shape))).values)
            probe[k] = flat[k] - h
            down = float(f(Tensor._wrap(probe.reshape(base.shape))).values)
            numeric[k] = (up - down) / (2.0 * h)
    if flat.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom))
