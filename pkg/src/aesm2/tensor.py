"""Dense float64 tensors with reverse-mode automatic differentiation.

Each op builds its output eagerly and, when any input participates in
differentiation, stores a closure mapping the output gradient to input
gradients. :func:`backward` linearizes the graph into a :class:`Tape`
(topological order) and replays it in reverse.

Shapes are explicit. The only implicit expansion is adding a 1-D bias
along the last axis, and scalar Python constants in arithmetic.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate ops without recording them (used by finite differences and inference)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self):
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        label = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # arithmetic sugar; scalar constants are the only non-Tensor operands
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, neg(other) if isinstance(other, Tensor) else -other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ShapeError("division by a Tensor is not supported; multiply by a reciprocal")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self):
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = rule
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    """Elementwise sum of equal shapes, bias-add of a 1-D ``b`` on the last axis, or a scalar."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        if np.ndim(b) != 0:
            raise ShapeError(f"add: constant operand must be a scalar, got shape {np.shape(b)}")
        c = float(b)
        return _record(a.data + c, (a,), lambda g: (g,))
    if a.shape == b.shape:
        return _record(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.ndim - 1))
        return _record(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        if np.ndim(b) != 0:
            raise ShapeError(f"mul: constant operand must be a scalar, got shape {np.shape(b)}")
        c = float(b)
        return _record(a.data * c, (a,), lambda g: (g * c,))
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    ad, bd = a.data, b.data
    return _record(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def neg(a) -> Tensor:
    return _record(-a.data, (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    # float mask: bool * float triggers a slow cast on every backward call
    pos = (out > 0).astype(np.float64)
    return _record(out, (a,), lambda g: (g * pos,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _record(s, (a,), lambda g: (g * s * (1.0 - s),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _record(e, (a,), lambda g: (g * e,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _record(np.log(x), (a,), lambda g: (g / x,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _record(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


def sum_(a: Tensor, axis=None) -> Tensor:
    shape = a.shape
    if axis is None:
        return _record(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))
    axis = axis % a.ndim

    def rule(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _record(a.data.sum(axis=axis), (a,), rule)


def mean(a: Tensor) -> Tensor:
    n = a.size
    shape = a.shape
    return _record(np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n),))


def squared_norm(tensors: Sequence[Tensor]) -> Tensor:
    """``sum_t sum(t * t)`` as a single node."""
    tensors = list(tensors)
    total = sum(float(np.dot(t.data.ravel(), t.data.ravel())) for t in tensors)
    return _record(np.asarray(total), tensors, lambda g: tuple(2.0 * g * t.data for t in tensors))


def weighted_sum(weights: Tensor, values: Tensor) -> Tensor:
    """Per-row convex combination: ``out[b] = sum_i weights[b, i] * values[b, i, :]``."""
    if weights.ndim != 2 or values.ndim != 3 or weights.shape != values.shape[:2]:
        raise ShapeError(f"weighted_sum: weights {weights.shape} do not match values {values.shape}")
    w, v = weights.data, values.data

    def rule(g):
        return np.einsum("bh,bnh->bn", g, v), w[:, :, None] * g[:, None, :]

    return _record(np.einsum("bn,bnh->bh", w, v), (weights, values), rule)


# ---------------------------------------------------------------------------
# normalization


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _record(s, (a,), rule)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    s = np.exp(out)

    def rule(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), rule)


def softmax_rows(a: Tensor) -> Tensor:
    """Row-wise softmax of an ``n x m`` matrix."""
    if a.ndim != 2 or min(a.shape) < 1:
        raise ShapeError(f"softmax_rows expects a non-empty matrix, got {a.shape}")
    return softmax(a, axis=1)


# ---------------------------------------------------------------------------
# structure


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no operands")
    nd = tensors[0].ndim
    axis = axis % max(nd, 1)
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != tensors[0].shape[i] for i in range(nd) if i != axis):
            raise ShapeError(
                f"concat: shapes {tensors[0].shape} and {t.shape} differ off axis {axis}"
            )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def rule(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record(np.concatenate([t.data for t in tensors], axis=axis), tensors, rule)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"stack: shapes {shape} and {t.shape} differ")
    axis = axis % (len(shape) + 1)

    def rule(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _record(np.stack([t.data for t in tensors], axis=axis), tensors, rule)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from exc
    return _record(data, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    inverse = np.argsort(axes)
    return _record(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate gradient."""
    shape = a.shape

    def rule(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record(np.array(a.data[index]), (a,), rule)


def masked_fill(a: Tensor, keep: np.ndarray, fill: float) -> Tensor:
    """Keep entries where ``keep`` is true, replace the rest by the constant ``fill``."""
    keep = np.asarray(keep, dtype=bool)
    if keep.shape != a.shape:
        raise ShapeError(f"masked_fill: mask {keep.shape} does not match {a.shape}")
    keepf = keep.astype(np.float64)
    out = a.data * keepf + (1.0 - keepf) * fill
    return _record(out, (a,), lambda g: (g * keepf,))


# ---------------------------------------------------------------------------
# backward pass


class Tape:
    """Topologically ordered record of every op reachable from a root tensor."""

    def __init__(self, nodes: list[Tensor]):
        self.nodes = nodes

    @classmethod
    def from_root(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(root, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack_.append((p, False))
        return cls(order)

    def __len__(self):
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf]


def backward(loss: Tensor) -> Tape:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss does not depend on any tensor that requires grad")
    tape = Tape.from_root(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
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
            grads[key] = pg if key not in grads else grads[key] + pg
    return tape


# ---------------------------------------------------------------------------
# finite-difference checking


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / scale


def check_gradients(
    loss_fn: Callable[[], Tensor],
    tensors: Iterable[Tensor],
    eps: float = 1e-5,
    coords: Callable[[Tensor], Iterable[tuple]] | None = None,
) -> float:
    """Max relative error between backprop and central differences over ``tensors``.

    ``loss_fn`` must be deterministic and read the tensors' current ``data``.
    ``coords`` may restrict which entries of a tensor are probed.
    """
    tensors = list(tensors)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    if loss.requires_grad:
        backward(loss)
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        idx_iter = coords(t) if coords is not None else np.ndindex(*t.shape)
        for idx in idx_iter:
            orig = t.data[idx]
            with no_grad():
                t.data[idx] = orig + eps
                up = float(loss_fn().data)
                t.data[idx] = orig - eps
                down = float(loss_fn().data)
            t.data[idx] = orig
            numeric = (up - down) / (2 * eps)
            worst = max(worst, float(_relative_error(np.asarray(analytic[idx]), np.asarray(numeric))))
    return worst


def grad_check(f: Callable[[Tensor], Tensor], at: Tensor, eps: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)."""
    at.requires_grad = True
    return check_gradients(lambda: f(at), [at], eps)
