"""Small reverse-mode autodiff over float64 numpy arrays.

Graphs are built by running ordinary Python code on :class:`Tensor` objects
(define-by-run). Every backward rule is written with tensor operations, so
a gradient computed with ``create_graph=True`` is itself differentiable.
That is what the discriminator gradient penalty needs.
"""

from __future__ import annotations

import contextlib
import itertools
import threading

import numpy as np

__all__ = [
    "AutodiffError",
    "ShapeError",
    "UnboundLeafError",
    "NonFiniteError",
    "Tensor",
    "tensor",
    "constant",
    "no_grad",
    "grad_enabled",
    "grad",
    "forward",
    "backward",
    "finite_diff_check",
    "concat",
    "softmin",
    "leaky_relu",
    "relu",
    "sigmoid",
    "norm",
]


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    pass


class UnboundLeafError(AutodiffError, KeyError):
    pass


class NonFiniteError(AutodiffError, FloatingPointError):
    pass


_state = threading.local()
_ids = itertools.count()


def grad_enabled():
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def _grad_mode(enabled):
    prev = grad_enabled()
    _state.enabled = enabled
    try:
        yield
    finally:
        _state.enabled = prev


def no_grad():
    """Context manager that stops graph recording on the current thread."""
    return _grad_mode(False)


class Tensor:
    """A dense float64 array plus the bookkeeping needed to differentiate it."""

    __slots__ = ("data", "requires_grad", "grad", "name", "op", "node_id",
                 "_parents", "_backward")

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self.op = "leaf"
        self.node_id = next(_ids)
        self._parents = ()
        self._backward = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.item())

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        label = self.name or self.op
        return f"Tensor({label}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    # -- operators --------------------------------------------------------
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def backward(self):
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every tracked leaf."""
        leaves = [n for n in _topo(self) if n._backward is None and n.requires_grad]
        grads = grad(self, leaves, allow_unused=True)
        for leaf, g in zip(leaves, grads):
            leaf.grad = g.data.copy() if leaf.grad is None else leaf.grad + g.data


def tensor(data, requires_grad=False, name=None):
    return Tensor(data, requires_grad=requires_grad, name=name)


def constant(data):
    return data if isinstance(data, Tensor) else Tensor(data)


def _make(data, op, parents, backward):
    out = Tensor(data)
    out.op = op
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteError(f"non-finite value produced by node {out.node_id} ({op})")
    if grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _sum_to(g, shape):
    if g.shape == shape:
        return g
    return sum_to(g, shape)


# -- elementwise arithmetic ------------------------------------------------

def add(a, b):
    a, b = constant(a), constant(b)

    def bw(g):
        return _sum_to(g, a.shape), _sum_to(g, b.shape)

    return _make(a.data + b.data, "add", (a, b), bw)


def sub(a, b):
    a, b = constant(a), constant(b)

    def bw(g):
        return _sum_to(g, a.shape), _sum_to(-g, b.shape)

    return _make(a.data - b.data, "sub", (a, b), bw)


def neg(a):
    return _make(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b):
    a, b = constant(a), constant(b)

    def bw(g):
        return _sum_to(g * b, a.shape), _sum_to(g * a, b.shape)

    return _make(a.data * b.data, "mul", (a, b), bw)


def div(a, b):
    a, b = constant(a), constant(b)

    def bw(g):
        return _sum_to(g / b, a.shape), _sum_to(-(g * a) / (b * b), b.shape)

    return _make(a.data / b.data, "div", (a, b), bw)


def power(a, p):
    p = float(p)
    if p == 2.0:
        return square(a)

    def bw(g):
        return (g * (p * power(a, p - 1.0)),)

    return _make(a.data ** p, "pow", (a,), bw)


def square(a):
    return _make(a.data * a.data, "square", (a,), lambda g: (g * (2.0 * a),))


def exp(a):
    def bw(g):
        return (g * out,)

    out = _make(np.exp(a.data), "exp", (a,), bw)
    return out


def log(a):
    if np.any(a.data <= 0):
        raise NonFiniteError(f"log of non-positive value at node {a.node_id} ({a.op})")
    return _make(np.log(a.data), "log", (a,), lambda g: (g / a,))


def sqrt(a):
    def bw(g):
        return (g / (2.0 * out),)

    out = _make(np.sqrt(a.data), "sqrt", (a,), bw)
    return out


def sigmoid(a):
    x = a.data
    e = np.exp(-np.abs(x))
    data = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def bw(g):
        return (g * (out * (1.0 - out)),)

    out = _make(data, "sigmoid", (a,), bw)
    return out


def leaky_relu(a, slope=0.2):
    mask = np.where(a.data > 0, 1.0, slope)
    return _make(a.data * mask, "leaky_relu", (a,), lambda g: (g * mask,))


def relu(a):
    return leaky_relu(a, 0.0)


def maximum(a, c):
    """max(a, c) for a constant c; subgradient 0 at a == c."""
    a = constant(a)
    mask = (a.data > c).astype(np.float64)
    return _make(np.maximum(a.data, c), "maximum", (a,), lambda g: (g * mask,))


def clip(a, lo, hi):
    a = constant(a)
    mask = ((a.data > lo) & (a.data < hi)).astype(np.float64)
    return _make(np.clip(a.data, lo, hi), "clip", (a,), lambda g: (g * mask,))


# -- shape and reduction ---------------------------------------------------

def tsum(a, axis=None, keepdims=False):
    def bw(g):
        if not keepdims and axis is not None:
            axes = (axis,) if isinstance(axis, int) else axis
            shape = list(a.shape)
            for ax in axes:
                shape[ax % a.ndim] = 1
            g = reshape(g, tuple(shape))
        elif not keepdims:
            g = reshape(g, (1,) * a.ndim)
        return (broadcast_to(g, a.shape),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), "sum", (a,), bw)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def sum_to(a, shape):
    """Sum a broadcast array back down to ``shape``."""
    data = a.data
    lead = data.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and data.shape[i + lead] != 1)
    reduced = np.sum(data, axis=axes, keepdims=True) if axes else data
    reduced = reduced.reshape(shape)
    return _make(reduced, "sum_to", (a,), lambda g: (broadcast_to(g, a.shape),))


def broadcast_to(a, shape):
    if a.shape == tuple(shape):
        return a
    return _make(np.broadcast_to(a.data, shape).copy(), "broadcast", (a,),
                 lambda g: (sum_to(g, a.shape),))


def reshape(a, shape):
    return _make(a.data.reshape(shape), "reshape", (a,), lambda g: (reshape(g, a.shape),))


def transpose(a):
    return _make(a.data.T, "transpose", (a,), lambda g: (transpose(g),))


def matmul(a, b):
    a, b = constant(a), constant(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        return matmul(g, transpose(b)), matmul(transpose(a), g)

    return _make(a.data @ b.data, "matmul", (a, b), bw)


def getitem(a, index):
    def bw(g):
        return (scatter(g, index, a.shape),)

    return _make(a.data[index], "getitem", (a,), bw)


def scatter(g, index, shape):
    """Zero array of ``shape`` with ``g`` added at ``index`` (adjoint of getitem)."""
    data = np.zeros(shape)
    np.add.at(data, index, g.data)
    return _make(data, "scatter", (g,), lambda h: (getitem(h, index),))


def concat(tensors, axis=-1):
    tensors = [constant(t) for t in tensors]
    axis = axis % tensors[0].ndim
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def bw(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            index = [slice(None)] * g.ndim
            index[axis] = slice(int(lo), int(hi))
            out.append(getitem(g, tuple(index)))
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return _make(data, "concat", tuple(tensors), bw)


# -- composites ------------------------------------------------------------

def softmin(d, axis=-1):
    """exp(-d) normalised along ``axis``, shifted by the row minimum first."""
    shifted = d.data - d.data.min(axis=axis, keepdims=True)
    e = np.exp(-shifted)
    w = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (-(out * (g - tsum(g * out, axis=axis, keepdims=True))),)

    out = _make(w, "softmin", (d,), bw)
    return out


def norm(a, axis=-1):
    """Euclidean norm along ``axis``; the gradient at a zero vector is 0."""
    data = np.sqrt(np.sum(a.data * a.data, axis=axis))

    def bw(g):
        g = reshape(g, np.expand_dims(out.data, axis).shape)
        n = reshape(out, g.shape)
        safe = n + (n.data == 0).astype(np.float64)
        return (a * (g / safe),)

    out = _make(data, "norm", (a,), bw)
    return out


# -- graph traversal -------------------------------------------------------

def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
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


def grad(output, inputs, create_graph=False, allow_unused=True, grad_output=None):
    """Gradients of ``output`` with respect to each tensor in ``inputs``.

    With ``create_graph`` the returned tensors are part of the graph and can
    be differentiated again. Inputs that do not influence ``output`` get a
    zero gradient.
    """
    if grad_output is None:
        if output.size != 1:
            raise ShapeError(f"gradient needs a scalar output, got shape {output.shape}")
        grad_output = np.ones_like(output.data)
    grads = {id(output): constant(grad_output)}
    with _grad_mode(create_graph):
        for node in reversed(_topo(output)):
            g = grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
    out = []
    for t in inputs:
        g = grads.get(id(t))
        if g is None:
            if not allow_unused:
                raise AutodiffError(f"input {t!r} does not reach the output")
            g = Tensor(np.zeros_like(t.data))
        out.append(g)
    return out


# -- named-binding helpers ---------------------------------------------------

class _Bindings(dict):
    def __missing__(self, key):
        raise UnboundLeafError(f"unbound leaf {key!r}")


def _bind(bindings, wrt):
    leaves = _Bindings()
    for name, value in bindings.items():
        leaves[name] = Tensor(value, requires_grad=name in wrt, name=name)
    return leaves


def forward(fn, bindings):
    """Evaluate ``fn`` on named leaves; returns plain arrays.

    ``fn`` receives a mapping name -> Tensor and returns a Tensor or a dict of
    Tensors. Looking up a name that was not bound raises UnboundLeafError.
    Leaves are bound without gradient tracking, but grad mode stays on so
    functions that differentiate internally (gradient penalties) still work.
    """
    result = fn(_bind(bindings, ()))
    if isinstance(result, dict):
        return {k: v.data for k, v in result.items()}
    return result.data


def backward(fn, bindings, wrt=None):
    """Gradient of the scalar ``fn(bindings)`` for every name in ``wrt`` (default: all)."""
    names = list(bindings) if wrt is None else list(wrt)
    leaves = _bind(bindings, set(names))
    out = fn(leaves)
    if out.size != 1:
        raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")
    grads = grad(out, [leaves[n] for n in names])
    return {n: g.data for n, g in zip(names, grads)}


def finite_diff_check(fn, bindings, epsilon=1e-5, wrt=None):
    """Max over parameters of |analytic - central difference| / max(1, |numeric|)."""
    if not 0 < epsilon <= 1e-2:
        raise ValueError("epsilon must lie in (0, 1e-2]")
    names = list(bindings) if wrt is None else list(wrt)
    analytic = backward(fn, bindings, names)
    base = {k: np.array(v, dtype=np.float64) for k, v in bindings.items()}

    def value(b):
        return float(forward(fn, b))

    worst = 0.0
    for name in names:
        arr = base[name]
        flat = arr.reshape(-1)
        ga = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = value(base)
            flat[i] = orig - epsilon
            fm = value(base)
            flat[i] = orig
            num = (fp - fm) / (2 * epsilon)
            worst = max(worst, abs(ga[i] - num) / max(1.0, abs(num)))
    return worst
