"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps an immutable numpy array.  Every op defined here
records its parents and a backward closure when at least one input requires
a gradient; :meth:`Tensor.backward` walks that graph in reverse topological
order and accumulates gradients into the leaves.

Broadcasting is deliberately narrow: ``add``/``sub``/``mul`` accept either
equal shapes or a row vector applied across the rows of a matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "DomainError",
    "NonFiniteError",
    "DegenerateEmbeddingError",
    "GraphConsumedError",
    "as_tensor",
    "matmul",
    "pairwise_dots",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "exp",
    "log",
    "tanh",
    "relu",
    "softmax_rows",
    "logsumexp_rows",
    "neg_log_softmax_at",
    "mean",
    "total",
    "sum_rows",
    "transpose",
    "concat_rows",
    "concat_cols",
    "l2_normalize_rows",
    "detach",
    "AdamState",
    "adam_step",
    "lr_schedule",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """Input lies outside an op's mathematical domain."""


class NonFiniteError(FloatingPointError):
    """A NaN or infinity reached a tensor or an optimizer update."""


class DegenerateEmbeddingError(ValueError):
    """A row has (numerically) zero norm and cannot be normalized."""


class GraphConsumedError(RuntimeError):
    """``backward`` was called twice on the same graph root."""


_Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """Immutable float64 array that may take part in a gradient graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        self._init(arr, requires_grad, (), None)

    @classmethod
    def _from_op(cls, data: np.ndarray, parents: tuple, backward: _Backward | None) -> "Tensor":
        out = cls.__new__(cls)
        rg = any(p.requires_grad for p in parents)
        out._init(np.asarray(data, dtype=np.float64), rg, parents if rg else (), backward if rg else None)
        return out

    def _init(self, arr, requires_grad, parents, backward):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"tensor of shape {arr.shape} contains NaN or Inf")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
        if self._consumed:
            raise GraphConsumedError("backward already ran on this graph; rebuild the forward pass")
        if not self.requires_grad:
            raise RuntimeError("tensor does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("implicit gradient only defined for single-element tensors")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=np.float64)
            if grad.shape != self.shape:
                raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        self._consumed = True

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_2d(name: str, *ts: Tensor) -> None:
    for t in ts:
        if t.data.ndim != 2:
            raise ShapeError(f"{name} expects 2-D operands, got shape {t.shape}")


def _broadcast_kind(a: Tensor, b: Tensor, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if a.data.ndim == 2 and b.data.ndim in (1, 2) and b.data.size == a.shape[1] and (
        b.data.ndim == 1 or b.shape[0] == 1
    ):
        return "row"
    raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, kind: str, shape) -> np.ndarray:
    if kind == "same":
        return g
    return g.sum(axis=0).reshape(shape)


# --------------------------------------------------------------------- ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_2d("matmul", a, b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return g @ bd.T, ad.T @ g

    return Tensor._from_op(ad @ bd, (a, b), backward)


def pairwise_dots(a, b, block: int = 32) -> Tensor:
    """``a @ b.T`` where every entry is reduced by the same elementwise sum.

    Unlike a BLAS product, entry ``(i, j)`` depends only on rows ``a[i]`` and
    ``b[j]``, never on their positions, so permuting rows permutes the result
    bit for bit.
    """
    a, b = as_tensor(a), as_tensor(b)
    _check_2d("pairwise_dots", a, b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_dots: row widths differ, {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    out = np.empty((ad.shape[0], bd.shape[0]))
    for lo in range(0, ad.shape[0], block):
        out[lo : lo + block] = (ad[lo : lo + block, None, :] * bd[None, :, :]).sum(axis=-1)

    def backward(g):
        return g @ bd, g.T @ ad

    return Tensor._from_op(out, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b, "add")
    bshape = b.shape

    def backward(g):
        return g, _unbroadcast(g, kind, bshape)

    return Tensor._from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b, "sub")
    bshape = b.shape

    def backward(g):
        return g, -_unbroadcast(g, kind, bshape)

    return Tensor._from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a, b, "mul")
    ad, bd, bshape = a.data, b.data, b.shape

    def backward(g):
        return g * bd, _unbroadcast(g * ad, kind, bshape)

    return Tensor._from_op(ad * bd, (a, b), backward)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return Tensor._from_op(a.data * c, (a,), lambda g: (g * c,))


def neg(a) -> Tensor:
    return scale(a, -1.0)


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError("log of a non-positive value")
    ad = a.data
    return Tensor._from_op(np.log(ad), (a,), lambda g: (g / ad,))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return Tensor._from_op(out, (a,), lambda g: (g * (1.0 - out * out),))


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0.0
    return Tensor._from_op(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def softmax_rows(a) -> Tensor:
    a = as_tensor(a)
    _check_2d("softmax_rows", a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=1, keepdims=True)),)

    return Tensor._from_op(out, (a,), backward)


def logsumexp_rows(a, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise ``log(sum(exp(a)))`` as an (M, 1) column.

    ``mask`` (boolean, same shape as ``a``) selects the entries that take part;
    every row must keep at least one entry.
    """
    a = as_tensor(a)
    _check_2d("logsumexp_rows", a)
    x = a.data
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape:
            raise ShapeError(f"mask shape {mask.shape} != input shape {x.shape}")
        if not mask.any(axis=1).all():
            raise ShapeError("logsumexp_rows: a row has no selected entries")
        x = np.where(mask, x, -np.inf)
    top = x.max(axis=1, keepdims=True)
    e = np.exp(x - top)
    # sorted summation: the result depends only on the multiset of row entries
    s = np.sort(e, axis=1).sum(axis=1, keepdims=True)
    out = top + np.log(s)
    weights = e / s

    def backward(g):
        return (weights * g,)

    return Tensor._from_op(out, (a,), backward)


def neg_log_softmax_at(a, target: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
    """Row-wise ``-log softmax(a)[target]`` over the entries selected by ``mask``.

    Computed as ``log1p(sum_j exp(a_j - a_t))`` when the target entry is the
    row maximum, which keeps full relative precision for tiny values instead
    of cancelling ``logsumexp(a) - a_t`` down to zero.  Returns an (M, 1)
    column.  The target entry is always included.
    """
    a = as_tensor(a)
    _check_2d("neg_log_softmax_at", a)
    x = a.data
    m_rows, n_cols = x.shape
    target = np.asarray(target, dtype=np.intp).ravel()
    if target.shape != (m_rows,) or np.any((target < 0) | (target >= n_cols)):
        raise ShapeError("neg_log_softmax_at: need one in-range target column per row")
    rows = np.arange(m_rows)
    others = np.ones(x.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool).copy()
    if others.shape != x.shape:
        raise ShapeError(f"mask shape {others.shape} != input shape {x.shape}")
    others[rows, target] = False

    d = np.where(others, x - x[rows, target][:, None], -np.inf)
    r = np.maximum(d.max(axis=1, keepdims=True), 0.0) if n_cols > 1 else np.zeros((m_rows, 1))
    e = np.exp(d - r)
    # sorted summation: the result depends only on the multiset of row entries
    s = np.sort(e, axis=1).sum(axis=1, keepdims=True)
    out = np.where(r > 0, r + np.log(np.exp(-r) + s), np.log1p(s))
    p = e / (np.exp(-r) + s)  # softmax weight of each non-target entry

    def backward(g):
        grad = p.copy()
        grad[rows, target] = -p.sum(axis=1)
        return (grad * g,)

    return Tensor._from_op(out, (a,), backward)


def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size
    shape = a.shape
    value = math.fsum(a.data.ravel().tolist()) / n
    return Tensor._from_op(value, (a,), lambda g: (np.full(shape, float(g) / n),))


def total(a) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    value = math.fsum(a.data.ravel().tolist())
    return Tensor._from_op(value, (a,), lambda g: (np.full(shape, float(g)),))


def sum_rows(a) -> Tensor:
    """Sum along each row, returning an (M, 1) column."""
    a = as_tensor(a)
    _check_2d("sum_rows", a)
    shape = a.shape
    return Tensor._from_op(
        a.data.sum(axis=1, keepdims=True), (a,), lambda g: (np.broadcast_to(g, shape).copy(),)
    )


def transpose(a) -> Tensor:
    a = as_tensor(a)
    _check_2d("transpose", a)
    return Tensor._from_op(a.data.T, (a,), lambda g: (g.T,))


def concat_rows(parts: Iterable) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_rows of an empty list")
    _check_2d("concat_rows", *parts)
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def backward(g):
        return [g[lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]

    try:
        data = np.concatenate([p.data for p in parts], axis=0)
    except ValueError as exc:
        raise ShapeError(f"concat_rows: {exc}") from None
    return Tensor._from_op(data, tuple(parts), backward)


def concat_cols(parts: Iterable) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat_cols of an empty list")
    _check_2d("concat_cols", *parts)
    bounds = np.cumsum([0] + [p.shape[1] for p in parts])

    def backward(g):
        return [g[:, lo:hi] for lo, hi in zip(bounds[:-1], bounds[1:])]

    try:
        data = np.concatenate([p.data for p in parts], axis=1)
    except ValueError as exc:
        raise ShapeError(f"concat_cols: {exc}") from None
    return Tensor._from_op(data, tuple(parts), backward)


def l2_normalize_rows(a, min_norm: float = 1e-12) -> Tensor:
    a = as_tensor(a)
    _check_2d("l2_normalize_rows", a)
    norms = np.sqrt((a.data * a.data).sum(axis=1, keepdims=True))
    if np.any(norms < min_norm):
        bad = np.flatnonzero(norms[:, 0] < min_norm).tolist()
        raise DegenerateEmbeddingError(f"rows {bad} have norm below {min_norm:g}")
    out = a.data / norms

    def backward(g):
        return ((g - out * (g * out).sum(axis=1, keepdims=True)) / norms,)

    return Tensor._from_op(out, (a,), backward)


def detach(a) -> Tensor:
    """Same values, cut from the graph."""
    return Tensor(as_tensor(a).data)


# --------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray], state: AdamState
) -> dict[str, np.ndarray]:
    """One bias-corrected Adam update; returns new parameter arrays.

    ``state`` is advanced in place.  Parameters missing from ``grads`` are
    treated as having zero gradient.
    """
    for name, g in grads.items():
        if name not in params:
            raise KeyError(f"gradient for unknown parameter {name!r}")
        if not np.all(np.isfinite(g)):
            n_bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NonFiniteError(f"gradient of {name!r} has {n_bad} non-finite entries (step {state.step + 1})")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new = {}
    for name, p in params.items():
        p = np.asarray(p, dtype=np.float64)
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter {name!r} shape {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != p.shape:
            raise ShapeError(f"Adam moment shape {m.shape} != parameter {name!r} shape {p.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name] = m
        state.v[name] = v
        new[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return new


def lr_schedule(epoch: int, base_lr: float = 1e-3, decay: float = 0.95, every: int = 5) -> float:
    """Step decay: ``base_lr * decay ** floor(epoch / every)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return base_lr * decay ** math.floor(epoch / every)
