"""Dense float64 tensors with reverse-mode automatic differentiation.

Just enough of an engine for a small transformer: elementwise arithmetic
with trailing-dimension broadcasting, (batched) matmul, row softmax,
layer norm, GELU, reductions, masked fill and gradient stopping. Values
are numpy arrays; the heavy row-wise kernels dispatch to
``loradrop._kernels`` (compiled extension or numpy fallback).
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "neg",
    "exp",
    "log",
    "relu",
    "gelu",
    "clamp_min",
    "matmul",
    "transpose",
    "reshape",
    "sum_",
    "mean",
    "masked_fill",
    "softmax_row",
    "layer_norm",
    "embedding",
    "take_token",
    "detach",
    "backward",
]

# graphs are thread-confined, so grad mode is tracked per thread
_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference / oracles)."""
    prev = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    """A float64 array plus an optional backward-graph record."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn", "_op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[], None] | None = None
        self._op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray, owned: bool = False) -> None:
        """Add g into grad. owned=True promises g is a freshly allocated
        array this tensor may take without copying."""
        if self.grad is None:
            self.grad = g if owned else np.array(g)
        else:
            self.grad += g

    def backward(self) -> None:
        backward(self)

    def detach(self) -> "Tensor":
        return detach(self)

    def __repr__(self) -> str:  # pragma: no cover
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'}, requires_grad={self.requires_grad})"

    # operator sugar; all semantics live in the module-level functions
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], op: str) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._op = op
    return out


def _broadcast_ok(sa: tuple[int, ...], sb: tuple[int, ...]) -> bool:
    """Trailing-dimension broadcasting only: equal shapes, same-rank with
    size-1 axes, or the smaller shape matching the larger's trailing dims."""
    if sa == sb:
        return True
    a, b = (sa, sb) if len(sa) >= len(sb) else (sb, sa)
    if len(a) == len(b):
        return all(x == y or x == 1 or y == 1 for x, y in zip(a, b))
    if b == ():
        return True
    return a[len(a) - len(b):] == b


def _check_broadcast(sa, sb, op: str) -> None:
    if not _broadcast_ok(sa, sb):
        raise DimensionError(f"{op}: shapes {sa} and {sb} are not trailing-broadcast compatible")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _unbroadcast2(g: np.ndarray, shape: tuple[int, ...]) -> tuple[np.ndarray, bool]:
    """_unbroadcast plus a flag telling whether the result is a fresh array."""
    out = _unbroadcast(g, shape)
    return out, out is not g


# ---------------------------------------------------------------------------
# elementwise suite


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "add")
    out = _node(a.data + b.data, (a, b), "add")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a.accumulate_grad(*_unbroadcast2(out.grad, a.shape))
            if b.requires_grad:
                b.accumulate_grad(*_unbroadcast2(out.grad, b.shape))
        out._backward_fn = _bw
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "sub")
    out = _node(a.data - b.data, (a, b), "sub")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a.accumulate_grad(*_unbroadcast2(out.grad, a.shape))
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-out.grad, b.shape), True)
        out._backward_fn = _bw
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "mul")
    out = _node(a.data * b.data, (a, b), "mul")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(out.grad * b.data, a.shape), True)
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(out.grad * a.data, b.shape), True)
        out._backward_fn = _bw
    return out


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_broadcast(a.shape, b.shape, "div")
    if np.any(b.data == 0.0):
        raise NumericError("div: denominator contains zero")
    out = _node(a.data / b.data, (a, b), "div")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                a.accumulate_grad(_unbroadcast(out.grad / b.data, a.shape), True)
            if b.requires_grad:
                b.accumulate_grad(_unbroadcast(-out.grad * a.data / (b.data * b.data), b.shape), True)
        out._backward_fn = _bw
    return out


def scale(a, s: float) -> Tensor:
    """Multiply by a python scalar."""
    return mul(a, float(s))


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = _node(-a.data, (a,), "neg")
    if out.requires_grad:
        def _bw():
            a.accumulate_grad(-out.grad, True)
        out._backward_fn = _bw
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    out = _node(np.exp(a.data), (a,), "exp")
    if out.requires_grad:
        def _bw():
            a.accumulate_grad(out.grad * out.data, True)
        out._backward_fn = _bw
    return out


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NumericError("log: input must be strictly positive")
    out = _node(np.log(a.data), (a,), "log")
    if out.requires_grad:
        def _bw():
            a.accumulate_grad(out.grad / a.data, True)
        out._backward_fn = _bw
    return out


def relu(a) -> Tensor:
    a = _as_tensor(a)
    out = _node(np.maximum(a.data, 0.0), (a,), "relu")
    if out.requires_grad:
        def _bw():
            a.accumulate_grad(out.grad * (a.data > 0.0), True)
        out._backward_fn = _bw
    return out


def gelu(a) -> Tensor:
    a = _as_tensor(a)
    flat = np.ascontiguousarray(a.data.reshape(-1))
    out = _node(_kernels.gelu(flat).reshape(a.shape), (a,), "gelu")
    if out.requires_grad:
        def _bw():
            g = _kernels.gelu_grad(flat, np.ascontiguousarray(out.grad.reshape(-1)))
            a.accumulate_grad(g.reshape(a.shape), True)
        out._backward_fn = _bw
    return out


def clamp_min(a, floor: float) -> Tensor:
    """max(a, floor); gradient is zero where the floor is active."""
    a = _as_tensor(a)
    out = _node(np.maximum(a.data, floor), (a,), "clamp_min")
    if out.requires_grad:
        def _bw():
            a.accumulate_grad(out.grad * (a.data > floor), True)
        out._backward_fn = _bw
    return out


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    if a.data.ndim != b.data.ndim:
        la, lb = a.data.ndim, b.data.ndim
        if min(la, lb) != 2:
            raise DimensionError(f"matmul: batch ranks {a.shape} @ {b.shape} unsupported")
    elif a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    out = _node(a.data @ b.data, (a, b), "matmul")
    if out.requires_grad:
        def _bw():
            if a.requires_grad:
                ga = out.grad @ np.swapaxes(b.data, -1, -2)
                a.accumulate_grad(_unbroadcast(ga, a.shape), True)
            if b.requires_grad:
                gb = np.swapaxes(a.data, -1, -2) @ out.grad
                b.accumulate_grad(_unbroadcast(gb, b.shape), True)
        out._backward_fn = _bw
    return out


def transpose(a, axes: tuple[int, ...] | None = None) -> Tensor:
    """Permute axes; default swaps the last two."""
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    inv = np.argsort(axes)
    out = _node(np.ascontiguousarray(np.transpose(a.data, axes)), (a,), "transpose")
    if out.requires_grad:
        def _bw():
            a.accumulate_grad(np.transpose(out.grad, inv))
        out._backward_fn = _bw
    return out


def reshape(a, shape: tuple[int, ...]) -> Tensor:
    a = _as_tensor(a)
    out = _node(np.ascontiguousarray(a.data).reshape(shape), (a,), "reshape")
    if out.requires_grad:
        def _bw():
            a.accumulate_grad(out.grad.reshape(a.shape))
        out._backward_fn = _bw
    return out


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = _node(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), "sum")
    if out.requires_grad:
        def _bw():
            g = out.grad
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            a.accumulate_grad(np.broadcast_to(g, a.shape).copy(), True)
        out._backward_fn = _bw
    return out


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.size if axis is None else (
        np.prod([a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    )
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / float(count))


def masked_fill(a, fill_where: np.ndarray, value: float) -> Tensor:
    """Write ``value`` where the boolean mask is true; gradient does not
    flow through filled positions."""
    a = _as_tensor(a)
    fill_where = np.asarray(fill_where, dtype=bool)
    _check_broadcast(a.shape, fill_where.shape, "masked_fill")
    mask = np.broadcast_to(fill_where, a.shape)
    data = a.data.copy()
    data[mask] = value
    out = _node(data, (a,), "masked_fill")
    if out.requires_grad:
        def _bw():
            g = out.grad.copy()
            g[mask] = 0.0
            a.accumulate_grad(g, True)
        out._backward_fn = _bw
    return out


# ---------------------------------------------------------------------------
# fused row-wise ops


def softmax_row(a) -> Tensor:
    """Softmax over the last axis. -inf entries map to exactly 0; a row of
    only -inf is rejected."""
    from .errors import DegeneracyError

    a = _as_tensor(a)
    if a.data.ndim < 1 or a.shape[-1] < 1:
        raise DimensionError(f"softmax_row: need a trailing axis, got shape {a.shape}")
    x2 = np.ascontiguousarray(a.data.reshape(-1, a.shape[-1]))
    if np.any(np.max(x2, axis=1) == -np.inf):
        raise DegeneracyError("softmax_row: a row is entirely -inf")
    y2 = _kernels.softmax_rows(x2)
    out = _node(y2.reshape(a.shape), (a,), "softmax_row")
    if out.requires_grad:
        def _bw():
            dy2 = np.ascontiguousarray(out.grad.reshape(-1, a.shape[-1]))
            a.accumulate_grad(_kernels.softmax_rows_grad(y2, dy2).reshape(a.shape), True)
        out._backward_fn = _bw
    return out


def layer_norm(a, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    a, gamma, beta = _as_tensor(a), _as_tensor(gamma), _as_tensor(beta)
    n = a.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise DimensionError(f"layer_norm: gamma/beta must be ({n},), got {gamma.shape}/{beta.shape}")
    x2 = np.ascontiguousarray(a.data.reshape(-1, n))
    y2, mu, rstd = _kernels.layernorm(x2, gamma.data, beta.data, eps)
    out = _node(y2.reshape(a.shape), (a, gamma, beta), "layer_norm")
    if out.requires_grad:
        def _bw():
            dy2 = np.ascontiguousarray(out.grad.reshape(-1, n))
            dx, dgamma, dbeta = _kernels.layernorm_grad(x2, gamma.data, mu, rstd, dy2)
            if a.requires_grad:
                a.accumulate_grad(dx.reshape(a.shape), True)
            if gamma.requires_grad:
                gamma.accumulate_grad(dgamma, True)
            if beta.requires_grad:
                beta.accumulate_grad(dbeta, True)
        out._backward_fn = _bw
    return out


# ---------------------------------------------------------------------------
# lookup / selection


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if np.any(ids < 0) or np.any(ids >= table.shape[0]):
        raise ContractError(f"embedding: ids out of range [0, {table.shape[0]})")
    out = _node(table.data[ids], (table,), "embedding")
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(table.data)
            np.add.at(g, ids, out.grad)
            table.accumulate_grad(g, True)
        out._backward_fn = _bw
    return out


def take_token(a, index: int) -> Tensor:
    """Select one sequence position: [B, L, D] -> [B, D]."""
    a = _as_tensor(a)
    if a.data.ndim != 3:
        raise DimensionError(f"take_token: expected 3-D input, got {a.shape}")
    out = _node(a.data[:, index, :].copy(), (a,), "take_token")
    if out.requires_grad:
        def _bw():
            g = np.zeros_like(a.data)
            g[:, index, :] = out.grad
            a.accumulate_grad(g, True)
        out._backward_fn = _bw
    return out


def detach(a) -> Tensor:
    """Value-identical tensor with no backward edge (gradient stop)."""
    a = _as_tensor(a)
    return Tensor(a.data)


# ---------------------------------------------------------------------------
# backward driver


def backward(root: Tensor) -> None:
    """Reverse-topological gradient sweep from a scalar root.

    Leaf gradients accumulate additively across calls. Interior nodes are
    consumed: their gradients, parent links and backward closures are
    released as the sweep passes them, so the graph's memory returns as
    soon as the caller drops the root (the closures otherwise pin their
    output tensors in reference cycles).
    """
    if root.size != 1:
        raise ContractError(f"backward: root must be a scalar, got shape {root.shape}")
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    root.accumulate_grad(np.ones_like(root.data))
    for node in reversed(topo):
        if node._backward_fn is not None:
            node._backward_fn()
            node._backward_fn = None
            node._parents = ()
            node.grad = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()
