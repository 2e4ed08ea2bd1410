"""Minimal reverse-mode automatic differentiation over numpy arrays.

Every operation records its parents and a vector-Jacobian product written in
terms of other recorded operations, so gradients are themselves
differentiable. That is what force matching needs: forces are a gradient of
the energy, and the training loss on forces has to be differentiated again
with respect to the weights.

Only the operations the force field needs are provided.
"""

from __future__ import annotations

import contextlib

import numpy as np
import scipy.sparse as sp

_state = {"record": True}


@contextlib.contextmanager
def recording(flag: bool):
    """Enable/disable graph recording for operations executed in the block."""
    old = _state["record"]
    _state["record"] = flag
    try:
        yield
    finally:
        _state["record"] = old


def no_grad():
    return recording(False)


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "vjp", "__weakref__")

    __array_priority__ = 1000

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = ()
        self.vjp = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)
    __pow__ = lambda self, p: power(self, p)
    __getitem__ = lambda self, key: getitem(self, key)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, vjp) -> Tensor:
    """Wrap ``data``; record ``vjp(g, need)`` if any parent is tracked.

    ``need[k]`` says whether parent ``k`` leads to a requested input, so a
    vjp may return ``None`` for the others and skip their work.
    """
    out = Tensor(data)
    if _state["record"] and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out.vjp = vjp
    return out


# ---------------------------------------------------------------- shape helpers

def sum_to(x: Tensor, shape) -> Tensor:
    """Sum ``x`` down to a broadcast-compatible ``shape``."""
    shape = tuple(shape)
    if x.shape == shape:
        return x
    ndiff = x.ndim - len(shape)
    axes = tuple(range(ndiff)) + tuple(
        i + ndiff for i, s in enumerate(shape) if s == 1 and x.shape[i + ndiff] != 1
    )
    data = x.data.sum(axis=axes, keepdims=True)
    if ndiff:
        data = data.reshape(data.shape[ndiff:])
    src_shape = x.shape
    return _node(data.reshape(shape), (x,), lambda g, need: (broadcast_to(g, src_shape),))


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    src_shape = x.shape
    return _node(np.broadcast_to(x.data, shape), (x,), lambda g, need: (sum_to(g, src_shape),))


def reshape(x: Tensor, shape) -> Tensor:
    src_shape = x.shape
    return _node(x.data.reshape(shape), (x,), lambda g, need: (reshape(g, src_shape),))


def transpose(x: Tensor) -> Tensor:
    return _node(x.data.T, (x,), lambda g, need: (transpose(g),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    return _node(np.swapaxes(x.data, a, b), (x,), lambda g, need: (swapaxes(g, a, b),))


def getitem(x: Tensor, key) -> Tensor:
    """Basic (slice) indexing only; use :func:`take` for gathers."""
    src_shape = x.shape
    return _node(x.data[key], (x,), lambda g, need: (_unindex(g, key, src_shape),))


def _unindex(g: Tensor, key, shape) -> Tensor:
    out = np.zeros(shape)
    out[key] = g.data
    return _node(out, (g,), lambda h, need: (getitem(h, key),))


def concat(xs, axis=-1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    data = np.concatenate([x.data for x in xs], axis=axis)
    ax = axis % data.ndim
    bounds = np.cumsum([0] + [x.shape[ax] for x in xs])

    def vjp(g, need):
        out = []
        for k in range(len(xs)):
            if not need[k]:
                out.append(None)
                continue
            key = (slice(None),) * ax + (slice(bounds[k], bounds[k + 1]),)
            out.append(getitem(g, key))
        return tuple(out)

    return _node(data, tuple(xs), vjp)


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g, need):
        return (sum_to(g, sa) if need[0] else None, sum_to(g, sb) if need[1] else None)

    return _node(a.data + b.data, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g, need):
        return (sum_to(g, sa) if need[0] else None, neg(sum_to(g, sb)) if need[1] else None)

    return _node(a.data - b.data, (a, b), vjp)


def neg(a) -> Tensor:
    return _node(-a.data, (a,), lambda g, need: (neg(g),))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g, need):
        return (
            sum_to(mul(g, b), sa) if need[0] else None,
            sum_to(mul(g, a), sb) if need[1] else None,
        )

    return _node(a.data * b.data, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape

    def vjp(g, need):
        ga = sum_to(div(g, b), sa) if need[0] else None
        gb = sum_to(neg(div(mul(g, a), mul(b, b))), sb) if need[1] else None
        return ga, gb

    return _node(a.data / b.data, (a, b), vjp)


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    if p == 1.0:
        return a
    return _node(a.data ** p, (a,), lambda g, need: (mul(g, mul(p, power(a, p - 1.0))),))


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``b`` two-dimensional; ``a`` may carry leading batch axes."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2:
        raise ValueError("matmul expects a 2-D right operand")

    def vjp(g, need):
        ga = matmul(g, transpose(b)) if need[0] else None
        gb = None
        if need[1]:
            a2 = reshape(a, (-1, a.shape[-1]))
            g2 = reshape(g, (-1, g.shape[-1]))
            gb = matmul(transpose(a2), g2)
        return ga, gb

    return _node(_matmul_data(a.data, b.data), (a, b), vjp)


def _matmul_data(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    # one 2-D BLAS call; stacked operands with a transposed ``y`` are far slower
    if x.ndim == 2:
        return x @ y
    return (x.reshape(-1, x.shape[-1]) @ y).reshape(x.shape[:-1] + (y.shape[1],))


def sum_(x: Tensor, axis=None, keepdims=False) -> Tensor:
    src_shape = x.shape
    data = x.data.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        kshape = (1,) * x.ndim
    else:
        axes = (axis,) if np.isscalar(axis) else tuple(axis)
        axes = tuple(ax % x.ndim for ax in axes)
        kshape = tuple(1 if i in axes else s for i, s in enumerate(src_shape))

    def vjp(g, need):
        return (broadcast_to(reshape(g, kshape), src_shape),)

    return _node(data, (x,), vjp)


def mean(x: Tensor, axis=None, keepdims=False) -> Tensor:
    n = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis, keepdims), 1.0 / max(int(n), 1))


# ---------------------------------------------------------------- elementwise

def exp(x: Tensor) -> Tensor:
    out = None

    def vjp(g, need):
        return (mul(g, out),)

    out = _node(np.exp(x.data), (x,), vjp)
    return out


def sqrt(x: Tensor) -> Tensor:
    out = None

    def vjp(g, need):
        return (div(g, mul(out, 2.0)),)

    out = _node(np.sqrt(x.data), (x,), vjp)
    return out


def sin(x: Tensor) -> Tensor:
    return _node(np.sin(x.data), (x,), lambda g, need: (mul(g, cos(x)),))


def cos(x: Tensor) -> Tensor:
    return _node(np.cos(x.data), (x,), lambda g, need: (neg(mul(g, sin(x))),))


def _chain(x: Tensor, fns, order: int = 0) -> Tensor:
    """Elementwise ``fns[order](x)`` whose derivative is ``fns[order + 1]``."""

    def vjp(g, need):
        if order + 1 >= len(fns):
            raise NotImplementedError("derivative order exhausted")
        return (mul(g, _chain(x, fns, order + 1)),)

    return _node(fns[order](x.data), (x,), vjp)


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(x: Tensor) -> Tensor:
    out = None

    def vjp(g, need):
        return (mul(g, mul(out, sub(1.0, out))),)

    out = _node(_sig(x.data), (x,), vjp)
    return out


def silu(x: Tensor) -> Tensor:
    """x * sigmoid(x) as one op, differentiable to third order."""
    s = _sig(x.data)
    a = s * (1.0 - s)  # sigmoid'
    c = 1.0 - 2.0 * s
    fns = (
        lambda z: z * s,
        lambda z: s + z * a,
        lambda z: a * (2.0 + z * c),
        lambda z: a * (c * (3.0 + z * c) - 2.0 * z * a),
    )
    return _chain(x, fns)


def polynomial(x: Tensor, coeffs) -> Tensor:
    """Elementwise ``sum_k coeffs[k] * x**k``, differentiable to third order."""
    poly = np.polynomial.Polynomial(coeffs)
    fns = [poly]
    for _ in range(3):
        poly = poly.deriv()
        fns.append(poly)
    return _chain(x, tuple(fns))


def tanh(x: Tensor) -> Tensor:
    out = None

    def vjp(g, need):
        return (mul(g, sub(1.0, mul(out, out))),)

    out = _node(np.tanh(x.data), (x,), vjp)
    return out


def abs_(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _node(np.abs(x.data), (x,), lambda g, need: (mul(g, sign),))


# ---------------------------------------------------------------- vector channels
#
# Vector features are stored (f, 3, d). The three bilinear maps below are
# mutual adjoints, so each one's vjp is written with the other two.

def outer(a, u) -> Tensor:
    """``out[f, c, k] = a[f, k] * u[f, c]``: channels times a direction."""
    a, u = as_tensor(a), as_tensor(u)

    def vjp(g, need):
        return (project(g, u) if need[0] else None, contract(g, a) if need[1] else None)

    return _node(np.einsum("fk,fc->fck", a.data, u.data), (a, u), vjp)


def project(v, u) -> Tensor:
    """``out[f, k] = sum_c v[f, c, k] * u[f, c]``: component along a direction."""
    v, u = as_tensor(v), as_tensor(u)

    def vjp(g, need):
        return (outer(g, u) if need[0] else None, contract(v, g) if need[1] else None)

    return _node(np.einsum("fck,fc->fk", v.data, u.data), (v, u), vjp)


def contract(v, a) -> Tensor:
    """``out[f, c] = sum_k v[f, c, k] * a[f, k]``: channel-weighted vector."""
    v, a = as_tensor(v), as_tensor(a)

    def vjp(g, need):
        return (outer(a, g) if need[0] else None, project(v, g) if need[1] else None)

    return _node(np.einsum("fck,fk->fc", v.data, a.data), (v, a), vjp)


# ---------------------------------------------------------------- gather / scatter

class Segments:
    """Integer index array with a cached sparse scatter matrix.

    ``take(x, seg)`` gathers rows ``x[idx]``; ``scatter(x, seg)`` sums rows of
    ``x`` into ``n`` buckets. They are each other's adjoint.
    """

    __slots__ = ("idx", "n", "_mat")

    def __init__(self, idx, n: int):
        self.idx = np.asarray(idx, dtype=np.int64)
        self.n = int(n)
        self._mat = None

    @property
    def matrix(self):
        if self._mat is None:
            m = len(self.idx)
            self._mat = sp.csr_matrix(
                (np.ones(m), (self.idx, np.arange(m))), shape=(self.n, m)
            )
        return self._mat


def take(x: Tensor, seg: Segments) -> Tensor:
    return _node(x.data[seg.idx], (x,), lambda g, need: (scatter(g, seg),))


def scatter(x: Tensor, seg: Segments) -> Tensor:
    flat = x.data.reshape(x.shape[0], int(np.prod(x.shape[1:], dtype=np.int64)))
    data = np.asarray(seg.matrix @ flat).reshape((seg.n,) + x.shape[1:])
    return _node(data, (x,), lambda g, need: (take(g, seg),))


# ---------------------------------------------------------------- driver

def _toposort(root: Tensor):
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
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(output: Tensor, inputs, grad_output=None, create_graph=False):
    """Gradients of ``output`` w.r.t. each of ``inputs``.

    Returns a list of Tensors (zeros for inputs the output does not depend
    on). With ``create_graph`` the returned tensors are themselves recorded
    and can be differentiated again.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    if grad_output is None:
        grad_output = Tensor(np.ones_like(output.data))
    want = {id(t): k for k, t in enumerate(inputs)}
    results = [None] * len(inputs)
    if output.requires_grad:
        order = _toposort(output)
        # only propagate into nodes from which a requested input is reachable
        relevant = set()
        for node in order:
            if id(node) in want or any(id(p) in relevant for p in node.parents):
                relevant.add(id(node))
        grads = {id(output): as_tensor(grad_output)}
        owned = set()  # accumulation buffers this pass allocated and may update in place
        with recording(create_graph):
            for node in reversed(order):
                g = grads.pop(id(node), None)
                if g is None:
                    continue
                if id(node) in want:
                    results[want[id(node)]] = g
                if node.vjp is None:
                    continue
                need = tuple(p.requires_grad and id(p) in relevant for p in node.parents)
                if not any(need):
                    continue
                pgrads = node.vjp(g, need)
                for p, pg, nd in zip(node.parents, pgrads, need):
                    if pg is None or not nd:
                        continue
                    key = id(p)
                    prev = grads.get(key)
                    if prev is None:
                        grads[key] = pg
                    elif create_graph:
                        grads[key] = add(prev, pg)
                    elif key in owned and prev.shape == np.broadcast_shapes(prev.shape, pg.shape):
                        prev.data += pg.data
                    else:
                        grads[key] = Tensor(prev.data + pg.data)
                        owned.add(key)
    for k, t in enumerate(inputs):
        if results[k] is None:
            results[k] = Tensor(np.zeros_like(t.data))
        elif results[k].shape != t.shape:
            results[k] = Tensor(np.broadcast_to(results[k].data, t.shape).copy())
    return results[0] if single else results
