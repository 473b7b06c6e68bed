"""Define-by-run reverse-mode differentiation on top of :mod:`latentreg.tensor`.

Each :class:`Var` records the vector-Jacobian products of the op that built it.
The graph built during one forward pass is the tape; :func:`backward` walks it
in reverse topological order exactly once and accumulates gradients additively.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import ShapeError

Vjp = Callable[[np.ndarray], np.ndarray]


class Var:
    __slots__ = ("value", "requires_grad", "name", "_parents")
    __array_priority__ = 1000

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = T.as_tensor(value)
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[tuple["Var", Vjp], ...] = ()

    @classmethod
    def from_op(cls, value, parents: Iterable[tuple["Var", Vjp]]) -> "Var":
        """Build an op result; only parents that need gradients are recorded."""
        out = cls(value)
        live = tuple((p, fn) for p, fn in parents if p.requires_grad)
        if live:
            out.requires_grad = True
            out._parents = live
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Var(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def value_of(x) -> np.ndarray:
    return x.value if isinstance(x, Var) else T.as_tensor(x)


def detach(x) -> Var:
    """Same value, no gradient flow."""
    return Var(value_of(x))


# ----------------------------------------------------------------------------
# backward


def _topo_order(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def _grads_by_id(loss: Var) -> dict[int, np.ndarray]:
    if loss.value.size != 1:
        raise ShapeError("backward", loss.shape, (), "loss must be a scalar")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(_topo_order(loss)):
        g = grads.get(id(node))
        if g is None:
            continue
        for parent, vjp in node._parents:
            contrib = vjp(g)
            pid = id(parent)
            if pid in grads:
                grads[pid] = grads[pid] + contrib
            else:
                grads[pid] = contrib
        if node._parents:
            # interior gradients are not needed again once propagated
            del grads[id(node)]
    return grads


def backward(loss: Var, params: Mapping[str, Var]) -> dict[str, np.ndarray]:
    """Gradient of the scalar ``loss`` for each named parameter.

    Parameters not reachable from ``loss`` get a zero gradient.
    """
    grads = _grads_by_id(loss)
    out = {}
    for name, p in params.items():
        g = grads.get(id(p))
        out[name] = np.zeros_like(p.value) if g is None else g.reshape(p.shape)
    return out


def grad(loss: Var, variables: Sequence[Var]) -> list[np.ndarray]:
    grads = _grads_by_id(loss)
    return [grads[id(v)].reshape(v.shape) if id(v) in grads else np.zeros_like(v.value)
            for v in variables]


# ----------------------------------------------------------------------------
# elementwise ops (tensor-with-tensor of equal shape, or tensor-with-scalar)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == tuple(shape):
        return g
    # only scalar-with-tensor broadcasting exists
    return np.asarray(g.sum()).reshape(shape)


def _binary_check(op: str, a: Var, b: Var) -> None:
    if a.ndim and b.ndim and a.shape != b.shape:
        raise ShapeError(op, a.shape, b.shape)


def add(a, b) -> Var:
    a, b = lift(a), lift(b)
    _binary_check("add", a, b)
    return Var.from_op(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Var:
    a, b = lift(a), lift(b)
    _binary_check("sub", a, b)
    return Var.from_op(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(-g, b.shape)),
    ])


def mul(a, b) -> Var:
    a, b = lift(a), lift(b)
    _binary_check("mul", a, b)
    av, bv = a.value, b.value
    return Var.from_op(av * bv, [
        (a, lambda g: _unbroadcast(g * bv, a.shape)),
        (b, lambda g: _unbroadcast(g * av, b.shape)),
    ])


def div(a, b) -> Var:
    a, b = lift(a), lift(b)
    _binary_check("div", a, b)
    av, bv = a.value, b.value
    with np.errstate(divide="ignore", invalid="ignore"):
        out = av / bv
    return Var.from_op(out, [
        (a, lambda g: _unbroadcast(g / bv, a.shape)),
        (b, lambda g: _unbroadcast(-g * av / (bv * bv), b.shape)),
    ])


def neg(a) -> Var:
    a = lift(a)
    return Var.from_op(-a.value, [(a, lambda g: -g)])


def exp(a) -> Var:
    a = lift(a)
    out = T.elementwise("exp", a.value)
    return Var.from_op(out, [(a, lambda g: g * out)])


def log(a) -> Var:
    a = lift(a)
    av = a.value
    return Var.from_op(T.elementwise("log", av), [(a, lambda g: g / av)])


def tanh(a) -> Var:
    a = lift(a)
    out = T.elementwise("tanh", a.value)
    return Var.from_op(out, [(a, lambda g: g * (1.0 - out * out))])


def square(a) -> Var:
    a = lift(a)
    av = a.value
    return Var.from_op(av * av, [(a, lambda g: 2.0 * g * av)])


def clip(a, lo: float, hi: float) -> Var:
    """Hard clamp; the gradient is 1 on ``[lo, hi]`` and 0 outside."""
    a = lift(a)
    av = a.value
    mask = ((av >= lo) & (av <= hi)).astype(T.DTYPE)
    return Var.from_op(T.elementwise("clip", av, lo=lo, hi=hi), [(a, lambda g: g * mask)])


def leaky_relu(a, slope: float = 0.2) -> Var:
    a = lift(a)
    av = a.value
    scale = np.where(av > 0, 1.0, slope)
    return Var.from_op(av * scale, [(a, lambda g: g * scale)])


# ----------------------------------------------------------------------------
# reductions and shape ops


def sum(a, axes=None) -> Var:  # noqa: A001 - mirrors numpy naming
    a = lift(a)
    shape = a.shape
    out = T.reduce("sum", a.value, axes)
    if axes is None:
        return Var.from_op(out, [(a, lambda g: np.broadcast_to(g, shape).copy())])
    axes_t = (axes,) if isinstance(axes, int) else tuple(axes)
    kept = T.reduce("sum", a.value, axes_t, keepdims=True).shape
    return Var.from_op(out, [(a, lambda g: np.broadcast_to(g.reshape(kept), shape).copy())])


def mean(a, axes=None) -> Var:
    a = lift(a)
    if axes is None:
        count = a.value.size
    else:
        axes_t = (axes,) if isinstance(axes, int) else tuple(axes)
        count = int(np.prod([a.shape[i] for i in axes_t]))
    return sum(a, axes) * (1.0 / count)


def reshape(a, shape) -> Var:
    a = lift(a)
    old = a.shape
    return Var.from_op(a.value.reshape(shape), [(a, lambda g: g.reshape(old))])


def getitem(a, index) -> Var:
    """Basic slicing/indexing; the gradient scatters back into a zero array."""
    a = lift(a)
    shape = a.shape

    def vjp(g):
        out = np.zeros(shape, dtype=T.DTYPE)
        out[index] = g
        return out

    return Var.from_op(a.value[index], [(a, vjp)])


def concat(parts: Sequence, axis: int = 0) -> Var:
    parts = [lift(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.value for p in parts], axis=axis)

    def make(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(bounds[i], bounds[i + 1])
        sl = tuple(sl)
        return lambda g: g[sl]

    return Var.from_op(out, [(p, make(i)) for i, p in enumerate(parts)])


def stack(parts: Sequence, axis: int = 0) -> Var:
    parts = [lift(p) for p in parts]
    out = np.stack([p.value for p in parts], axis=axis)
    return Var.from_op(out, [(p, (lambda i: lambda g: np.take(g, i, axis=axis))(i))
                             for i, p in enumerate(parts)])


def dot(a, b) -> Var:
    """Sum of the elementwise product, a scalar."""
    return sum(mul(a, b))


# ----------------------------------------------------------------------------
# convolution and upsampling


def conv3d(x, w, bias=None, stride: int = 1, padding: int = 0) -> Var:
    x, w = lift(x), lift(w)
    k = w.shape[2] if w.ndim == 5 else 0
    out = T.conv3d(x.value, w.value, None if bias is None else value_of(bias),
                   stride=stride, padding=padding)
    xv, wv, x_shape = x.value, w.value, x.shape
    parents = [
        (x, lambda g: T.conv3d_grad_input(x_shape, wv, g, stride, padding)),
        (w, lambda g: T.conv3d_grad_weight(xv, g, k, stride, padding)),
    ]
    if bias is not None:
        parents.append((lift(bias), lambda g: g.sum(axis=(1, 2, 3))))
    return Var.from_op(out, parents)


def upsample(x, factor: int = 2) -> Var:
    x = lift(x)
    in_shape = x.shape
    out = T.upsample_trilinear(x.value, factor)
    return Var.from_op(out, [(x, lambda g: T.upsample_trilinear_adjoint(g, in_shape, factor))])
