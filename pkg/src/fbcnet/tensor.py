"""Dense float64 tensors with reverse-mode automatic differentiation.

Only what the FBCNet layers need is here: a handful of elementwise ops,
three reductions, reshape, and a ``record`` hook that lets fused layer ops
(convolution, batch norm, windowed pooling) register their own backward rule.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from scipy.special import expit

Scalar = Union[int, float]
BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    """A node in the autodiff graph.

    ``data`` is always a float64 ndarray. ``grad`` is filled in by
    :meth:`backward` for leaf tensors created with ``requires_grad=True``.
    Calling backward twice without :meth:`zero_grad` accumulates.
    """

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operators -----------------------------------------------------------
    def __add__(self, other):
        return elementwise("add", self, other)

    def __radd__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __rsub__(self, other):
        return elementwise("sub", _as_tensor(other), self)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __rmul__(self, other):
        return elementwise("mul", self, other)

    def __truediv__(self, other):
        return elementwise("div", self, other)

    def __rtruediv__(self, other):
        return elementwise("div", _as_tensor(other), self)

    def __pow__(self, other):
        return elementwise("pow", self, other)

    def __neg__(self):
        return elementwise("mul", self, -1.0)

    def exp(self):
        return elementwise("exp", self)

    def log(self):
        return elementwise("ln", self)

    def sigmoid(self):
        return elementwise("sigmoid", self)

    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    # autodiff ------------------------------------------------------------
    def backward(self) -> None:
        """Propagate d(self)/d(node) to every reachable leaf, seeded with 1.0."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg


def _topological_order(root: Tensor) -> list[Tensor]:
    # iterative DFS; each node is emitted once, parents before children
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def record(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an op over ``parents``.

    ``backward`` maps the upstream gradient to one gradient per parent (or
    ``None``). The graph edge is only kept if some parent requires grad.
    """
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == np.float64 else data.astype(np.float64)
    out.grad = None
    out.name = None
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_broadcast(a: tuple, b: tuple) -> None:
    if a == b or a in ((), (1,)) or b in ((), (1,)):
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise ValueError(f"shapes {a} and {b} are not broadcast-compatible "
                         "(only scalar and trailing-dimension broadcast is supported)")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    if lead > 0:
        g = g.sum(axis=tuple(range(lead)))
    keep = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if keep:
        g = g.sum(axis=keep, keepdims=True)
    return g.reshape(shape)


_sigmoid = expit


_UNARY = {"exp", "ln", "sigmoid"}
_CLAMPS = {"max-with-scalar", "min-with-scalar"}
_BINARY = {"add", "sub", "mul", "div", "pow"}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Apply an elementwise op.

    Binary kinds: ``add``, ``sub``, ``mul``, ``div``, ``pow``. Unary kinds:
    ``exp``, ``ln``, ``sigmoid``. ``max-with-scalar`` clamps from below at the
    scalar ``b`` and ``min-with-scalar`` clamps from above; their gradient is
    zero where the clamp is active.
    """
    a = _as_tensor(a)
    x = a.data
    if kind in _UNARY:
        if kind == "exp":
            y = np.exp(x)
            return record(y, (a,), lambda g: (g * y,))
        if kind == "ln":
            return record(np.log(x), (a,), lambda g: (g / x,))
        s = _sigmoid(x)
        return record(s, (a,), lambda g: (g * s * (1.0 - s),))

    if kind in _CLAMPS:
        if b is None or isinstance(b, Tensor):
            raise TypeError(f"{kind} needs a plain scalar bound")
        bound = float(b)
        if kind == "max-with-scalar":
            mask = x >= bound
            y = np.maximum(x, bound)
        else:
            mask = x <= bound
            y = np.minimum(x, bound)
        return record(y, (a,), lambda g: (g * mask,))

    if kind not in _BINARY:
        raise ValueError(f"unknown elementwise op {kind!r}")
    if b is None:
        raise TypeError(f"{kind} needs two operands")
    b = _as_tensor(b)
    _check_broadcast(a.shape, b.shape)
    y_ = b.data
    sa, sb = a.shape, b.shape

    if kind == "add":
        return record(x + y_, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))
    if kind == "sub":
        return record(x - y_, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))
    if kind == "mul":
        return record(x * y_, (a, b),
                      lambda g: (_unbroadcast(g * y_, sa), _unbroadcast(g * x, sb)))
    if kind == "div":
        return record(x / y_, (a, b),
                      lambda g: (_unbroadcast(g / y_, sa), _unbroadcast(-g * x / y_**2, sb)))

    out = x ** y_

    def pow_backward(g):
        ga = _unbroadcast(g * y_ * x ** (y_ - 1.0), sa)
        gb = None
        if b.requires_grad:
            with np.errstate(divide="ignore", invalid="ignore"):
                gb = _unbroadcast(np.where(x > 0, g * out * np.log(np.where(x > 0, x, 1.0)), 0.0), sb)
        return ga, gb

    return record(out, (a, b), pow_backward)


def reduce(kind: str, a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    """Sum, mean or max over one axis (or all axes when ``axis`` is None).

    Max routes the whole upstream gradient to the first maximal element.
    """
    a = _as_tensor(a)
    x = a.data
    if axis is not None:
        if not -x.ndim <= axis < x.ndim:
            raise ValueError(f"axis {axis} out of range for shape {a.shape}")
        axis = axis % x.ndim
    shape = a.shape

    def expand(g):
        if axis is None:
            return np.broadcast_to(np.reshape(g, ()), shape)
        return g if keepdims else np.expand_dims(g, axis)

    if kind == "sum":
        return record(np.asarray(x.sum(axis=axis, keepdims=keepdims)), (a,),
                      lambda g: (np.broadcast_to(expand(g), shape).copy(),))
    if kind == "mean":
        n = x.size if axis is None else x.shape[axis]
        return record(np.asarray(x.mean(axis=axis, keepdims=keepdims)), (a,),
                      lambda g: (np.broadcast_to(expand(g), shape) / n,))
    if kind != "max":
        raise ValueError(f"unknown reduction {kind!r}")

    if axis is None:
        idx = int(np.argmax(x))
        out = np.asarray(x.reshape(-1)[idx])
        if keepdims:
            out = out.reshape((1,) * x.ndim)

        def max_all_backward(g):
            gx = np.zeros(x.size)
            gx[idx] = np.reshape(g, ())
            return (gx.reshape(shape),)

        return record(out, (a,), max_all_backward)

    idx = np.expand_dims(np.argmax(x, axis=axis), axis)
    out = np.take_along_axis(x, idx, axis)
    if not keepdims:
        out = np.squeeze(out, axis)

    def max_backward(g):
        gx = np.zeros_like(x)
        np.put_along_axis(gx, idx, expand(g), axis)
        return (gx,)

    return record(out, (a,), max_backward)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return record(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


# finite-difference checking ------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    worst_index: tuple | None = None

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error < self.tol)


def numerical_grad(f: Callable[[], Tensor], x: Tensor, eps: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar ``f()`` w.r.t. ``x.data`` (perturbed in place)."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f().item()
        flat[i] = orig - eps
        fm = f().item()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return g


def gradient_check(f: Callable, x: Tensor | Sequence[Tensor], eps: float = 1e-5,
                   tol: float = 1e-6, floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic and central-difference gradients of a scalar function.

    ``f`` is called with ``x`` when ``x`` is a single tensor, or with no
    arguments when ``x`` is a list of tensors (e.g. model parameters closed
    over by ``f``). The per-element relative error is
    ``|a - n| / max(|a|, |n|, floor)``; the report holds its maximum.

    Central differences carry round-off of roughly ``ulp(f) / eps`` (about
    1e-11 at eps=1e-5), so gradients that are exactly zero, such as a bias
    feeding training-mode batch norm, are scored against ``floor`` rather
    than against that noise.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    call = (lambda: f(x)) if isinstance(x, Tensor) else f
    for t in xs:
        t.requires_grad = True
        t.zero_grad()
    call().backward()
    worst, where = 0.0, None
    for k, t in enumerate(xs):
        analytic = np.zeros_like(t.data) if t.grad is None else t.grad.copy()
        numeric = numerical_grad(call, t, eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        rel = np.abs(analytic - numeric) / denom
        if rel.size and rel.max() > worst:
            worst = float(rel.max())
            where = (k,) + np.unravel_index(int(np.argmax(rel)), rel.shape)
    return GradCheckReport(worst, tol, where)
