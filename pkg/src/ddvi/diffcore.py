"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tensor` wraps a numpy array and remembers the operation that
produced it.  Graphs are built on the fly (define-by-run) and discarded after
each :func:`backward` call.
"""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from scipy.linalg import solve_triangular as _solve_tri


class ShapeError(ValueError):
    pass


_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Evaluate without recording graph edges."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Differentiable array node.

    ``op`` names the producing operation (``"leaf"`` for inputs), ``parents``
    are the input nodes and ``_backward`` maps the output gradient to one
    gradient per parent.
    """

    __slots__ = ("values", "grad", "requires_grad", "op", "parents", "_backward", "name")
    __array_priority__ = 1000

    def __init__(self, values, requires_grad=False, name=None):
        self.values = np.asarray(values, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self.parents = ()
        self._backward = None
        self.name = name

    @property
    def shape(self):
        return self.values.shape

    @property
    def ndim(self):
        return self.values.ndim

    @property
    def T(self):
        return transpose(self)

    def numpy(self):
        return self.values

    def item(self):
        return float(self.values)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    __add__ = lambda a, b: add(a, b)
    __radd__ = lambda a, b: add(b, a)
    __sub__ = lambda a, b: sub(a, b)
    __rsub__ = lambda a, b: sub(b, a)
    __mul__ = lambda a, b: mul(a, b)
    __rmul__ = lambda a, b: mul(b, a)
    __truediv__ = lambda a, b: div(a, b)
    __rtruediv__ = lambda a, b: div(b, a)
    __neg__ = lambda a: neg(a)
    __matmul__ = lambda a, b: matmul(a, b)
    __getitem__ = lambda a, idx: getitem(a, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(values, op, parents, backward):
    out = Tensor(values)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.op = op
        out.parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _node(a.values + b.values, "add", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _node(a.values - b.values, "sub", (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    av, bv = a.values, b.values
    return _node(av * bv, "mul", (a, b),
                 lambda g: (_unbroadcast(g * bv, a.shape), _unbroadcast(g * av, b.shape)))


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("div", a, b)
    av, bv = a.values, b.values
    out = av / bv
    return _node(out, "div", (a, b),
                 lambda g: (_unbroadcast(g / bv, a.shape), _unbroadcast(-g * out / bv, b.shape)))


def neg(a):
    a = as_tensor(a)
    return _node(-a.values, "neg", (a,), lambda g: (-g,))


def square(a):
    a = as_tensor(a)
    av = a.values
    return _node(av * av, "square", (a,), lambda g: (2.0 * g * av,))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.values)
    return _node(out, "exp", (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    av = a.values
    return _node(np.log(av), "log", (a,), lambda g: (g / av,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.values)
    return _node(out, "tanh", (a,), lambda g: (g * (1.0 - out * out),))


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.values)
    return _node(out, "sqrt", (a,), lambda g: (0.5 * g / out,))


def clamp_min(a, floor):
    """``max(a, floor)``; gradient is zero where the floor is active."""
    a = as_tensor(a)
    keep = a.values > floor
    return _node(np.where(keep, a.values, floor), "clamp", (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# reductions and shape manipulation


def sum_(a, axis=None, keepdims=False):
    a = as_tensor(a)
    out = a.values.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, "sum", (a,), backward)


def mean(a, axis=None, keepdims=False):
    n = a.values.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / n)


def logsumexp(a, axis=-1, keepdims=False):
    a = as_tensor(a)
    m = a.values.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a.values - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = np.log(tot) + m
    soft = s / tot
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return _node(out, "logsumexp", (a,), backward)


def reshape(a, shape):
    a = as_tensor(a)
    try:
        out = a.values.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} to {tuple(shape)}") from None
    return _node(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = as_tensor(a)
    out = np.transpose(a.values, axes)
    inv = None if axes is None else np.argsort(axes)
    return _node(out, "transpose", (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape):
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.values, shape)
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return _node(out, "broadcast", (a,), lambda g: (_unbroadcast(g, a.shape),))


def getitem(a, idx):
    a = as_tensor(a)
    out = a.values[idx]

    def backward(g):
        full = np.zeros(a.shape)
        np.add.at(full, idx, g)
        return (full,)

    return _node(np.array(out), "slice", (a,), backward)


def diagonal(a):
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"diagonal: expected square matrix, got {a.shape}")
    n = a.shape[0]
    return _node(np.diag(a.values).copy(), "slice", (a,), lambda g: (np.diag(g),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.values for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes} along axis {axis}") from None
    cuts = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(out, "concat", tuple(tensors), lambda g: tuple(np.split(g, cuts, axis=axis)))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    av, bv = a.values, b.values
    return _node(av @ bv, "matmul", (a, b), lambda g: (g @ bv.T, av.T @ g))


def einsum(spec, a, b):
    """Two-operand einsum.

    Every index of each operand must appear in the other operand or in the
    output, so that both gradients are again plain einsums.
    """
    a, b = as_tensor(a), as_tensor(b)
    lhs, out_idx = spec.replace(" ", "").split("->")
    ia, ib = lhs.split(",")
    for own, other in ((ia, ib), (ib, ia)):
        if not set(own) <= set(other) | set(out_idx):
            raise ValueError(f"einsum: index set of {own!r} not recoverable in {spec!r}")
    try:
        out = np.einsum(spec, a.values, b.values, optimize=True)
    except ValueError:
        raise ShapeError(f"einsum {spec!r}: incompatible shapes {a.shape} and {b.shape}") from None
    av, bv = a.values, b.values
    return _node(out, "einsum", (a, b), lambda g: (
        np.einsum(f"{out_idx},{ib}->{ia}", g, bv, optimize=True),
        np.einsum(f"{out_idx},{ia}->{ib}", g, av, optimize=True),
    ))


def _phi(x):
    """Lower triangle with halved diagonal."""
    out = np.tril(x)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky(a):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    The gradient is returned symmetrized, which is the right convention when
    the input is built as a symmetric matrix.
    """
    a = as_tensor(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"cholesky: expected square matrix, got {a.shape}")
    L = np.linalg.cholesky(a.values)

    def backward(g):
        P = _phi(L.T @ g)
        # S = L^-T P L^-1
        Y = _solve_tri(L, P, lower=True, trans="T")
        S = _solve_tri(L, Y.T, lower=True, trans="T").T
        return (0.5 * (S + S.T),)

    return _node(L, "cholesky", (a,), backward)


def solve_triangular(L, b, trans=False):
    """Solve ``L x = b`` (or ``L^T x = b`` when ``trans``) for lower-triangular L."""
    L, b = as_tensor(L), as_tensor(b)
    if L.ndim != 2 or L.shape[0] != L.shape[1] or b.shape[0] != L.shape[0]:
        raise ShapeError(f"triangular-solve: incompatible shapes {L.shape} and {b.shape}")
    Lv = L.values
    x = _solve_tri(Lv, b.values, lower=True, trans="T" if trans else "N")

    def backward(g):
        gb = _solve_tri(Lv, g, lower=True, trans="N" if trans else "T")
        gb2 = gb.reshape(gb.shape[0], -1)
        x2 = x.reshape(x.shape[0], -1)
        gL = -(x2 @ gb2.T) if trans else -(gb2 @ x2.T)
        return (np.tril(gL), gb)

    return _node(x, "triangular-solve", (L, b), backward)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root):
    order, seen = [], set()
    stack = [(root, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root):
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf needing it.

    Returns a dict mapping each reached leaf to its gradient array.
    """
    if root.values.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    if not root.requires_grad:
        return {}
    grads = {id(root): np.ones_like(root.values)}
    leaves = {}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.op == "leaf":
            node.grad = g.copy() if node.grad is None else node.grad + g
            leaves[node] = node.grad
            continue
        for p, pg in zip(node.parents, node._backward(g)):
            if not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=np.float64)
            if pg.shape != p.shape:
                pg = pg.reshape(p.shape)
            prev = grads.get(id(p))
            grads[id(p)] = pg if prev is None else prev + pg
    return leaves


def grad_check(f, params, eps=1e-5, coords=None):
    """Max relative error between autodiff and central differences.

    ``f`` maps the list of leaf tensors ``params`` to a scalar tensor and must
    be deterministic.  ``coords`` optionally restricts the check to a list of
    ``(param_index, flat_index)`` pairs.
    """
    for p in params:
        p.grad = None
        p.requires_grad = True
    out = f(params)
    if not np.isfinite(out.values).all():
        raise FloatingPointError("grad_check: non-finite function value")
    backward(out)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    if coords is None:
        coords = [(k, i) for k, p in enumerate(params) for i in range(p.values.size)]
    worst = 0.0
    for k, i in coords:
        flat = params[k].values.reshape(-1)
        orig = flat[i]
        vals = []
        for step in (eps, -eps):
            flat[i] = orig + step
            v = f(params).values
            if not np.isfinite(v).all():
                flat[i] = orig
                raise FloatingPointError("grad_check: non-finite function value")
            vals.append(float(v))
        flat[i] = orig
        fd = (vals[0] - vals[1]) / (2 * eps)
        ad = analytic[k].reshape(-1)[i]
        worst = max(worst, abs(ad - fd) / (abs(fd) + 1e-8))
    return worst
