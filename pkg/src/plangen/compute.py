"""Rank-2 float64 tensors with a reverse-mode gradient tape.

Every tensor is a 2-D array; vectors are stored as ``(1, n)`` rows.  Operations
record their inputs and a local backward rule when any input requires a
gradient.  Nodes carry a monotonically increasing id, so sorting the reachable
nodes by id yields the recording order and reversing it is a valid
topological order for the backward sweep.
"""
from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "GradientTape", "ShapeError", "DomainError", "ContractError",
    "OracleInvalidError", "tensor", "zeros", "ones", "no_grad", "grad_enabled",
    "matmul", "add", "sub", "mul", "div", "neg", "tanh", "sigmoid", "exp", "log",
    "softplus", "elementwise", "softmax_rows", "log_softmax_rows", "layer_norm",
    "concat", "reshape", "transpose", "sum_all", "mean_all", "sum_rows",
    "gather_rows", "outer_add", "straight_through", "backward", "grad_check",
    "GradCheckReport",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input outside the domain of a function (e.g. log of a non-positive)."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class OracleInvalidError(RuntimeError):
    """The finite-difference oracle cannot be trusted for this function."""


_ids = itertools.count()
_GRAD = True


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block (used for decoding and FD probes)."""
    global _GRAD
    prev, _GRAD = _GRAD, False
    try:
        yield
    finally:
        _GRAD = prev


def grad_enabled() -> bool:
    return _GRAD


def _as2d(data) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 0:
        return arr.reshape(1, 1)
    if arr.ndim == 1:
        return arr.reshape(1, -1)
    if arr.ndim != 2:
        raise ShapeError(f"tensors are rank <= 2, got shape {arr.shape}")
    return arr


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as2d(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._id = next(_ids)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other): return add(self, other)
    def __radd__(self, other): return add(other, self)
    def __sub__(self, other): return sub(self, other)
    def __rsub__(self, other): return sub(other, self)
    def __mul__(self, other): return mul(self, other)
    def __rmul__(self, other): return mul(other, self)
    def __truediv__(self, other): return div(self, other)
    def __neg__(self): return neg(self)
    def __matmul__(self, other): return matmul(self, other)

    def __getitem__(self, idx) -> "Tensor":
        return _slice(self, idx)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)))


def ones(rows: int, cols: int) -> Tensor:
    return Tensor(np.ones((rows, cols)))


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(parents: tuple[Tensor, ...]) -> bool:
    for p in parents:
        if p.requires_grad:
            return True
    return False


def _node(data: np.ndarray, parents: tuple[Tensor, ...], rule) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._id = next(_ids)
    if _GRAD and _tracked(parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    if g.shape == shape:
        return g
    if shape[0] == 1 and g.shape[0] != 1:
        g = g.sum(axis=0, keepdims=True)
    if shape[1] == 1 and g.shape[1] != 1:
        g = g.sum(axis=1, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    (ra, ca), (rb, cb) = a.shape, b.shape
    if (ra == rb or ra == 1 or rb == 1) and (ca == cb or ca == 1 or cb == 1):
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} x {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def rule(g):
        return (g @ bd.T if need_a else None), (ad.T @ g if need_b else None)

    return _node(ad @ bd, (a, b), rule)


def transpose(a: Tensor) -> Tensor:
    return _node(a.data.T.copy(), (a,), lambda g: (g.T,))


def reshape(a: Tensor, rows: int, cols: int) -> Tensor:
    if rows * cols != a.data.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as ({rows}, {cols})")
    shape = a.shape
    return _node(a.data.reshape(rows, cols), (a,), lambda g: (g.reshape(shape),))


def _slice(a: Tensor, idx) -> Tensor:
    if not isinstance(idx, tuple):
        idx = (idx, slice(None))
    rows, cols = idx
    # integer indices keep the 2-D layout
    if isinstance(rows, (int, np.integer)):
        rows = slice(int(rows), int(rows) + 1 if rows != -1 else None)
    if isinstance(cols, (int, np.integer)):
        cols = slice(int(cols), int(cols) + 1 if cols != -1 else None)
    key = (rows, cols)
    shape = a.shape

    def rule(g):
        full = np.zeros(shape)
        full[key] = g
        return (full,)

    return _node(a.data[key], (a,), rule)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    parts = [_lift(p) for p in parts]
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise ShapeError(f"concat(axis={axis}): mismatched shapes {[p.shape for p in parts]}")
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts]).tolist()
    spans = list(zip(bounds[:-1], bounds[1:]))

    def rule(g):
        if axis == 0:
            return tuple(g[a:b] for a, b in spans)
        return tuple(g[:, a:b] for a, b in spans)

    return _node(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), rule)


def gather_rows(table: Tensor, ids: Sequence[int]) -> Tensor:
    """Rows ``ids`` of ``table``; gradients scatter-add back into those rows."""
    ids = np.asarray(ids, dtype=np.int64).reshape(-1)
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise IndexError(f"row id out of range [0, {n}): {ids.tolist()}")
    shape = table.shape

    def rule(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _node(table.data[ids], (table,), rule)


def outer_add(p: Tensor, q: Tensor) -> Tensor:
    """Row ``i * len(q) + j`` of the result is ``p[i] + q[j]``."""
    if p.shape[1] != q.shape[1]:
        raise ShapeError(f"outer_add: feature widths differ for {p.shape} and {q.shape}")
    m, n, d = p.shape[0], q.shape[0], p.shape[1]
    out = (p.data[:, None, :] + q.data[None, :, :]).reshape(m * n, d)

    def rule(g):
        g3 = g.reshape(m, n, d)
        return g3.sum(axis=1), g3.sum(axis=0)

    return _node(out, (p, q), rule)


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _node(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _node(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad

    def rule(g):
        return (_unbroadcast(g * bd, ad.shape) if need_a else None,
                _unbroadcast(g * ad, bd.shape) if need_b else None)

    return _node(ad * bd, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def rule(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return _node(out, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # two-sided form keeps exp() from overflowing
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive entry")
    ad = a.data
    return _node(np.log(ad), (a,), lambda g: (g / ad,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x)
    return _node(out, (a,), lambda g: (g * _sigmoid(x),))


_UNARY = {"tanh": tanh, "sigmoid": sigmoid, "exp": exp, "log": log, "neg": neg, "softplus": softplus}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch an elementwise operation by name."""
    if kind in _UNARY:
        if len(operands) != 1:
            raise ContractError(f"{kind} takes one operand")
        return _UNARY[kind](_lift(operands[0]))
    if kind in _BINARY:
        if len(operands) != 2:
            raise ContractError(f"{kind} takes two operands")
        return _BINARY[kind](*operands)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------- reductions / normalisers

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _node(np.array([[a.data.sum()]]), (a,), lambda g: (np.full(shape, g[0, 0]),))


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.data.size
    return _node(np.array([[a.data.mean()]]), (a,), lambda g: (np.full(shape, g[0, 0] / n),))


def sum_rows(a: Tensor) -> Tensor:
    """Column-wise sum over rows, giving a ``(1, n)`` row."""
    shape = a.shape
    return _node(a.data.sum(axis=0, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def softmax_rows(a: Tensor) -> Tensor:
    x = a.data
    e = np.exp(x - x.max(axis=1, keepdims=True))
    out = e / e.sum(axis=1, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return _node(out, (a,), rule)


def log_softmax_rows(a: Tensor) -> Tensor:
    x = a.data
    shifted = x - x.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=1, keepdims=True),)

    return _node(out, (a,), rule)


LN_EPS = 1e-5


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    n = x.shape[1]
    if gain.shape != (1, n) or bias.shape != (1, n):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} do not match width {n}")
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data

    def rule(g):
        gx = g * gd
        dx = inv * (gx - gx.mean(axis=1, keepdims=True) - xhat * (gx * xhat).mean(axis=1, keepdims=True))
        return dx, (g * xhat).sum(axis=0, keepdims=True), g.sum(axis=0, keepdims=True)

    return _node(xhat * gd + bias.data, (x, gain, bias), rule)


def straight_through(hard: np.ndarray, soft: Tensor) -> Tensor:
    """Forward value ``hard``; gradient passes to ``soft`` unchanged."""
    hard = _as2d(hard)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: {hard.shape} vs {soft.shape}")
    return _node(hard.copy(), (soft,), lambda g: (g,))


# ---------------------------------------------------------------- backward

@dataclass
class GradientTape:
    """Recorded operations reachable from an output, in recording order."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def collect(cls, root: Tensor) -> "GradientTape":
        seen: set[int] = set()
        found: list[Tensor] = []
        stack = [root]
        while stack:
            t = stack.pop()
            if t._id in seen or not t.requires_grad:
                continue
            seen.add(t._id)
            found.append(t)
            stack.extend(t._parents)
        found.sort(key=lambda t: t._id)
        return cls(found)

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Leaf gradients accumulate across calls; call ``zero_grad`` between updates.
    """
    if loss.shape != (1, 1):
        raise ContractError(f"backward needs a 1x1 loss, got {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape (no input requires grad)")
    tape = GradientTape.collect(loss)
    for node in tape.nodes:
        if node._backward is not None:
            node.grad = None
    loss.grad = np.ones((1, 1)) if loss._backward is not None or loss.grad is None else loss.grad + 1.0
    for node in reversed(tape.nodes):
        g = node.grad
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            parent.grad = pg if parent.grad is None else parent.grad + pg


# ---------------------------------------------------------------- finite-difference oracle

@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.errors.values())

    @property
    def worst(self) -> tuple[str, float]:
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor] | Iterable[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare taped gradients of scalar ``f()`` with central differences.

    The error per entry is ``|taped - fd| / max(|taped|, |fd|, abs_floor)`` and
    the report keeps the maximum per parameter.  ``f`` must rebuild its graph
    on each call and be deterministic (freeze any sampling noise).
    """
    if not isinstance(params, dict):
        params = {p.name or f"param{i}": p for i, p in enumerate(params)}
    with no_grad():
        v0, v1 = f().item(), f().item()
    if v0 != v1:
        raise OracleInvalidError(f"two forward passes disagree: {v0!r} vs {v1!r}")

    for p in params.values():
        p.grad = None
    backward(f())
    errors = {}
    for name, p in params.items():
        taped = np.zeros(p.shape) if p.grad is None else p.grad.copy()
        fd = np.empty(p.shape)
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        with no_grad():
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = f().item()
                flat[i] = orig - h
                down = f().item()
                flat[i] = orig
                fd.reshape(-1)[i] = (up - down) / (2 * h)
        denom = np.maximum(np.maximum(np.abs(taped), np.abs(fd)), abs_floor)
        errors[name] = float(np.max(np.abs(taped - fd) / denom))
    return GradCheckReport(errors, tol)
