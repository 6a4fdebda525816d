"""Dense-tensor reverse-mode differentiation.

Every value in the package that needs a gradient is a :class:`Tensor`
wrapping a float64 numpy array.  Operations record their parents and a
closure mapping the output gradient to parent gradients; :func:`backward`
walks the recorded graph once in reverse topological order.

Only leaf tensors (``requires_grad=True`` and created by the user) keep a
``.grad``; intermediate gradients live in a dictionary for the duration
of a single backward pass.  Broadcasting follows numpy semantics and is
undone in the backward pass by summing over expanded axes.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DomainError, NonFiniteError, ShapeError, VocabularyError

__all__ = [
    "Tensor",
    "OP_KINDS",
    "forward_op",
    "backward",
    "topological_order",
    "no_grad",
    "is_grad_enabled",
    "astensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "tanh",
    "sigmoid",
    "exp",
    "log",
    "softplus",
    "sqrt",
    "square",
    "abs_",
    "sum_",
    "mean",
    "concat",
    "take",
    "reshape",
    "transpose",
    "embedding",
    "log_softmax",
    "dropout_apply",
    "numerical_gradient",
    "gradient_errors",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: produced non-finite values")


class Tensor:
    """A float64 array that can take part in a reverse-mode graph."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, *, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = op

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = parents
            out._backward = backward_fn
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- introspection -------------------------------------------------
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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({np.array2string(self.data, precision=6)}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return take(self, index)

    # method aliases
    def sum(self, axis=None, keepdims: bool = False) -> Tensor:
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> Tensor:
        return mean(self, axis=axis, keepdims=keepdims)

    def tanh(self) -> Tensor:
        return tanh(self)

    def sigmoid(self) -> Tensor:
        return sigmoid(self)

    def exp(self) -> Tensor:
        return exp(self)

    def log(self) -> Tensor:
        return log(self)

    def square(self) -> Tensor:
        return square(self)

    def sqrt(self) -> Tensor:
        return sqrt(self)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def astensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# -- elementwise binary -----------------------------------------------------


def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add"
    )


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub"
    )


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data

    def grad_fn(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return Tensor._result(ad * bd, (a, b), grad_fn, "mul")


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    _broadcast_check("div", a, b)
    ad, bd = a.data, b.data
    if np.any(bd == 0.0):
        raise DomainError("div: division by zero")
    out = ad / bd

    def grad_fn(g):
        return _unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)

    return Tensor._result(out, (a, b), grad_fn, "div")


def neg(a) -> Tensor:
    a = astensor(a)
    return Tensor._result(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    ad, bd = a.data, b.data

    def grad_fn(g):
        ga = np.matmul(g, np.swapaxes(bd, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(ad, -1, -2), g) if b.requires_grad else None
        return (
            None if ga is None else _unbroadcast(ga, ad.shape),
            None if gb is None else _unbroadcast(gb, bd.shape),
        )

    return Tensor._result(out, (a, b), grad_fn, "matmul")


# -- elementwise unary ------------------------------------------------------


def tanh(a) -> Tensor:
    a = astensor(a)
    out = np.tanh(a.data)
    return Tensor._result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = astensor(a)
    out = _sigmoid_np(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def exp(a) -> Tensor:
    a = astensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return Tensor._result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = astensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError(f"log: non-positive input (min {a.data.min():.3g})")
    ad = a.data
    return Tensor._result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def softplus(a) -> Tensor:
    a = astensor(a)
    ad = a.data
    out = np.logaddexp(0.0, ad)
    return Tensor._result(out, (a,), lambda g: (g * _sigmoid_np(ad),), "softplus")


def sqrt(a) -> Tensor:
    a = astensor(a)
    if np.any(a.data <= 0.0):
        raise DomainError(f"sqrt: non-positive input (min {a.data.min():.3g})")
    out = np.sqrt(a.data)
    return Tensor._result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a) -> Tensor:
    a = astensor(a)
    ad = a.data
    return Tensor._result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def abs_(a) -> Tensor:
    a = astensor(a)
    ad = a.data
    return Tensor._result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


# -- reductions and structure -----------------------------------------------


def _normalize_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    return tuple(ax % ndim for ax in axes)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    shape = a.shape
    axes = _normalize_axes(axis, a.ndim)

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.sum(a.data, axis=axes, keepdims=keepdims), (a,), grad_fn, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = astensor(a)
    shape = a.shape
    axes = _normalize_axes(axis, a.ndim)
    count = int(np.prod([shape[ax] for ax in axes])) if axes else 1

    def grad_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, shape).copy(),)

    return Tensor._result(np.mean(a.data, axis=axes, keepdims=keepdims), (a,), grad_fn, "mean")


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = tuple(astensor(t) for t in tensors)
    if not ts:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def grad_fn(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._result(out, ts, grad_fn, "concat")


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def take(a, index) -> Tensor:
    """Slice or gather from ``a`` using numpy indexing."""
    a = astensor(a)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"slice: {exc} for shape {a.shape}") from None
    shape = a.shape
    advanced = _has_advanced(index)

    def grad_fn(g):
        full = np.zeros(shape)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] = g
        return (full,)

    return Tensor._result(np.array(out, dtype=np.float64), (a,), grad_fn, "slice")


def reshape(a, shape) -> Tensor:
    a = astensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} to {shape}") from None
    return Tensor._result(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = astensor(a)
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    inverse = tuple(np.argsort(axes))
    return Tensor._result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),), "transpose")


def embedding(weight, ids) -> Tensor:
    """Row lookup ``weight[ids]`` with scatter-add gradient."""
    weight = astensor(weight)
    ids = np.asarray(ids)
    if weight.ndim != 2:
        raise ShapeError(f"embedding-lookup: weight must be 2-D, got {weight.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise VocabularyError(f"embedding-lookup: id out of range [0, {weight.shape[0]})")
    shape = weight.shape

    def grad_fn(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return Tensor._result(weight.data[ids], (weight,), grad_fn, "embedding-lookup")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def grad_fn(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return Tensor._result(out, (a,), grad_fn, "log-softmax")


def dropout_apply(a, mask: np.ndarray, rate: float) -> Tensor:
    """Apply a pre-sampled keep-mask with inverted-dropout scaling."""
    a = astensor(a)
    if not 0.0 <= rate < 1.0:
        raise ContractError(f"dropout-mask-apply: rate must lie in [0, 1), got {rate}")
    scaled = np.asarray(mask, dtype=np.float64) / (1.0 - rate)
    try:
        out = a.data * scaled
    except ValueError:
        raise ShapeError(f"dropout-mask-apply: mask {scaled.shape} vs input {a.shape}") from None
    return Tensor._result(out, (a,), lambda g: (_unbroadcast(g * scaled, a.shape),), "dropout-mask-apply")


OP_KINDS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "matmul": matmul,
    "tanh": tanh,
    "sigmoid": sigmoid,
    "exp": exp,
    "log": log,
    "softplus": softplus,
    "sum": sum_,
    "mean": mean,
    "square": square,
    "sqrt": sqrt,
    "abs": abs_,
    "concat": lambda *ts, axis=-1: concat(ts, axis=axis),
    "slice": take,
    "reshape": reshape,
    "transpose": transpose,
    "embedding-lookup": embedding,
    "log-softmax": log_softmax,
    "dropout-mask-apply": dropout_apply,
}


def forward_op(kind: str, inputs: Sequence, **kwargs) -> Tensor:
    """Dispatch an operation by name, e.g. ``forward_op("tanh", [x])``."""
    try:
        fn = OP_KINDS[kind]
    except KeyError:
        raise ContractError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


# -- backward ----------------------------------------------------------------


def topological_order(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` that require grad, parents first."""
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
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.size != 1:
        raise ContractError(f"backward: root must be scalar-shaped, got {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward: root is not on a recorded graph")
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(topological_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


# -- finite-difference checking ---------------------------------------------


def numerical_gradient(fn: Callable[[], Tensor], tensors: Iterable[Tensor], eps: float = 1e-5) -> list[np.ndarray]:
    """Central finite differences of scalar ``fn()`` w.r.t. each tensor's data."""
    out = []
    with no_grad():
        for t in tensors:
            g = np.zeros_like(t.data)
            flat, gflat = t.data.reshape(-1), g.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = fn().item()
                flat[i] = orig - eps
                lo = fn().item()
                flat[i] = orig
                gflat[i] = (hi - lo) / (2 * eps)
            out.append(g)
    return out


def gradient_errors(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
                    floor: float = 1e-7) -> float:
    """Worst elementwise relative error between analytic and numerical gradients.

    The denominator is ``max(|analytic|, |numeric|, floor / 1e-4)`` so that
    entries below the absolute floor are judged on absolute error.
    """
    for t in tensors:
        t.grad = None
    backward(fn())
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]
    numeric = numerical_gradient(fn, tensors, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor / 1e-4)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst
