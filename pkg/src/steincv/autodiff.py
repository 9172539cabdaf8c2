"""Array-valued reverse-mode tape, forward-mode duals, and exact divergences.

The tape records numpy-array primals so that whole minibatches are single
graph nodes.  Forward-mode is implemented with ``Dual`` pairs whose components
may themselves be tape ``Tensor``s; divergence of a vector field is computed
by one dual pass whose tangent carries a stacked basis, and the resulting
graph stays differentiable with respect to the field's parameters
(forward-over-reverse).  Third and higher-order derivatives are out of scope.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node of the reverse-mode tape holding a float64 array primal."""

    # keep numpy from hijacking `ndarray op Tensor`
    __array_ufunc__ = None

    def __init__(self, value, parents=(), backward=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self._backward = backward
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return add(self, -as_tensor(other))

    def __rsub__(self, other):
        return add(as_tensor(other), -self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(as_tensor(other), self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return tmean(self, axis=axis)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _binary(a, b, value, da, db):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(da(g), a.value.shape),
                _unbroadcast(db(g), b.value.shape))

    return Tensor(value(a.value, b.value), (a, b), backward)


def add(a, b):
    return _binary(a, b, lambda x, y: x + y, lambda g: g, lambda g: g)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _binary(a, b, lambda x, y: x * y,
                   lambda g: g * b.value, lambda g: g * a.value)


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _binary(a, b, lambda x, y: x / y,
                   lambda g: g / b.value,
                   lambda g: -g * a.value / b.value ** 2)


def power(a, p: float):
    a = as_tensor(a)
    out = a.value ** p
    return Tensor(out, (a,), lambda g: (g * p * a.value ** (p - 1),))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.value @ b.value

    def backward(g):
        av, bv = a.value, b.value
        ga = g @ np.swapaxes(bv, -1, -2) if bv.ndim > 1 else np.multiply.outer(g, bv)
        gb = np.swapaxes(av, -1, -2) @ g if av.ndim > 1 else np.multiply.outer(av, g)
        return (_unbroadcast(np.asarray(ga), av.shape),
                _unbroadcast(np.asarray(gb), bv.shape))

    return Tensor(out, (a, b), backward)


def _unary(a, value, deriv):
    a = as_tensor(a)
    out = value(a.value)
    return Tensor(out, (a,), lambda g: (g * deriv(a.value, out),))


def exp(x):
    if isinstance(x, Dual):
        e = exp(x.primal)
        return Dual(e, e * x.tangent)
    if isinstance(x, Tensor):
        return _unary(x, np.exp, lambda v, o: o)
    return np.exp(x)


def log(x):
    if isinstance(x, Dual):
        return Dual(log(x.primal), x.tangent / x.primal)
    if isinstance(x, Tensor):
        return _unary(x, np.log, lambda v, o: 1.0 / v)
    return np.log(x)


def sin(x):
    if isinstance(x, Dual):
        return Dual(sin(x.primal), cos(x.primal) * x.tangent)
    if isinstance(x, Tensor):
        return _unary(x, np.sin, lambda v, o: np.cos(v))
    return np.sin(x)


def cos(x):
    if isinstance(x, Dual):
        return Dual(cos(x.primal), -sin(x.primal) * x.tangent)
    if isinstance(x, Tensor):
        return _unary(x, np.cos, lambda v, o: -np.sin(v))
    return np.cos(x)


def tanh(x):
    if isinstance(x, Dual):
        t = tanh(x.primal)
        return Dual(t, (1.0 - t * t) * x.tangent)
    if isinstance(x, Tensor):
        return _unary(x, np.tanh, lambda v, o: 1.0 - o * o)
    return np.tanh(x)


def sigmoid(x):
    if isinstance(x, Dual):
        s = sigmoid(x.primal)
        return Dual(s, s * (1.0 - s) * x.tangent)
    if isinstance(x, Tensor):
        return _unary(x, expit, lambda v, o: o * (1.0 - o))
    return expit(x)


def tsum(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            axes = axis if isinstance(axis, tuple) else (axis,)
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.value.shape).copy(),)

    return Tensor(out, (a,), backward)


def tmean(a, axis=None):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.value.shape[axis]
    return tsum(a, axis=axis) * (1.0 / n)


def reshape(a, shape):
    a = as_tensor(a)
    return Tensor(a.value.reshape(shape), (a,),
                  lambda g: (g.reshape(a.value.shape),))


# -- reverse sweep ----------------------------------------------------------


def _toposort(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            stack.append((p, False))
    return order


def backward(root: Tensor) -> set:
    """Reverse-accumulate d(root)/d(node) into `.grad` for every reachable node.

    `root` must be scalar-valued.  Returns the set of ids of visited nodes so
    callers can tell which requested parameters actually appear in the graph.
    """
    if root.value.size != 1:
        raise ValueError("backward root must be scalar-valued")
    order = _toposort(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        for parent, g in zip(node.parents, node._backward(node.grad)):
            parent.grad = g if parent.grad is None else parent.grad + g
    return {id(n) for n in order}


def grad(expr: Tensor, wrt) -> list:
    """Gradients of a scalar expression w.r.t. a list of parameter Tensors.

    Parameters absent from the graph get zero gradients.
    """
    visited = backward(expr)
    out = []
    for p in wrt:
        if id(p) in visited and p.grad is not None:
            out.append(p.grad)
        else:
            out.append(np.zeros_like(p.value))
    return out


# -- forward mode -----------------------------------------------------------


class Dual:
    """Forward-mode pair (primal, tangent); components may be arrays or Tensors."""

    __array_ufunc__ = None
    __slots__ = ("primal", "tangent")

    def __init__(self, primal, tangent):
        self.primal = primal
        self.tangent = tangent

    def __add__(self, other):
        if isinstance(other, Dual):
            return Dual(self.primal + other.primal, self.tangent + other.tangent)
        return Dual(self.primal + other, self.tangent)

    __radd__ = __add__

    def __neg__(self):
        return Dual(-self.primal, -self.tangent)

    def __sub__(self, other):
        if isinstance(other, Dual):
            return Dual(self.primal - other.primal, self.tangent - other.tangent)
        return Dual(self.primal - other, self.tangent)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Dual):
            return Dual(self.primal * other.primal,
                        self.primal * other.tangent + self.tangent * other.primal)
        return Dual(self.primal * other, self.tangent * other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Dual):
            q = self.primal / other.primal
            return Dual(q, (self.tangent - q * other.tangent) / other.primal)
        return Dual(self.primal / other, self.tangent / other)

    def __rtruediv__(self, other):
        q = other / self.primal
        return Dual(q, -q * self.tangent / self.primal)

    def __pow__(self, p):
        return Dual(self.primal ** p,
                    p * self.primal ** (p - 1) * self.tangent)

    def __matmul__(self, other):
        if isinstance(other, Dual):
            return Dual(matmul_any(self.primal, other.primal),
                        matmul_any(self.tangent, other.primal)
                        + matmul_any(self.primal, other.tangent))
        return Dual(matmul_any(self.primal, other), matmul_any(self.tangent, other))

    def __rmatmul__(self, other):
        return Dual(matmul_any(other, self.primal), matmul_any(other, self.tangent))


def matmul_any(a, b):
    """Matrix product dispatching over ndarray / Tensor / Dual operands."""
    if isinstance(a, Dual):
        return a.__matmul__(b)
    if isinstance(b, Dual):
        return b.__rmatmul__(a)
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return matmul(a, b)
    return a @ b


def jvp(field, point, tangent):
    """Jacobian-vector product J(point) @ tangent in a single forward pass."""
    point = np.asarray(point, dtype=np.float64)
    tangent = np.asarray(tangent, dtype=np.float64)
    if point.shape != tangent.shape:
        raise ValueError(f"tangent shape {tangent.shape} != point shape {point.shape}")
    out = field(Dual(point, tangent))
    return np.asarray(out.tangent, dtype=np.float64)


def field_with_divergence(field, points):
    """Evaluate a square vector field and its exact divergence on a batch.

    `points` is (n, D) (ndarray or Tensor); the field must be written with the
    generic ops of this module.  Returns `(phi, div)` tape Tensors of shapes
    (n, D) and (n,).  One dual pass carries all D basis tangents stacked on a
    leading axis, and every tangent operation is recorded on the tape, so
    `div` is differentiable w.r.t. any parameter Tensors inside `field`.
    """
    x = as_tensor(points)
    if x.value.ndim != 2:
        raise ValueError("points must be a (n, D) batch")
    d = x.value.shape[1]
    basis = np.eye(d)[:, None, :]          # (D, 1, D) broadcasts over samples
    out = field(Dual(x, Tensor(basis)))
    if not isinstance(out, Dual):
        raise ValueError("field must propagate Dual inputs")
    phi = as_tensor(out.primal)
    if phi.value.shape != x.value.shape:
        raise ValueError(
            f"field output shape {phi.value.shape} != input shape {x.value.shape}")
    tang = as_tensor(out.tangent)
    # tangent broadcasts to (D, n, D); pick dPhi_j/dtheta_j and sum over j
    div = tsum(mul(tang, basis), axis=(0, 2))
    if div.value.ndim == 0:                # degenerate n=1 broadcast
        div = reshape(div, (1,))
    return phi, div


def divergence(field, points) -> Tensor:
    """Exact divergence of a square vector field at each row of `points`."""
    _, div = field_with_divergence(field, np.atleast_2d(np.asarray(points, float)))
    return div
