import numpy as np
import pytest

from corrstab import autodiff as ad
from corrstab.autodiff import Segments, Tensor


def numgrad(fn, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (fn(xp) - fn(xm)) / (2 * h)
    return g


def check(op, *shapes, seed=0, tol=1e-7):
    rng = np.random.default_rng(seed)
    xs = [rng.normal(size=s) for s in shapes]
    for k in range(len(xs)):
        def scalar(xk):
            args = [Tensor(xk if j == k else xs[j]) for j in range(len(xs))]
            with ad.no_grad():
                return float(ad.sum_(op(*args) * weights).data)

        out = op(*[Tensor(x) for x in xs])
        weights = np.random.default_rng(seed + 1).normal(size=out.shape)
        ts = [Tensor(x, requires_grad=True) for x in xs]
        (g,) = ad.grad(ad.sum_(op(*ts) * weights), [ts[k]])
        np.testing.assert_allclose(g.data, numgrad(scalar, xs[k].copy()), rtol=tol, atol=tol)


@pytest.mark.parametrize(
    "op,shapes",
    [
        (lambda a, b: a * b + a / (b * b + 1.0), [(3, 4), (3, 4)]),
        (lambda a, b: a @ b, [(3, 4), (4, 2)]),
        (lambda a: ad.silu(a), [(5, 3)]),
        (lambda a: ad.sigmoid(a) * ad.tanh(a), [(5, 3)]),
        (lambda a: ad.sin(a) * ad.cos(a) + ad.exp(a * 0.1), [(4,)]),
        (lambda a: ad.sqrt(a * a + 1.0), [(4, 2)]),
        (lambda a: ad.polynomial(a, [1.0, -2.0, 0.5, 3.0]), [(6,)]),
        (lambda a: ad.concat([a, a * 2.0], axis=1), [(3, 2)]),
        (lambda a: ad.reshape(ad.swapaxes(a, 0, 1), (-1,)), [(3, 2)]),
        (lambda a, u: ad.outer(a, u), [(4, 3), (4, 3)]),
        (lambda v, u: ad.project(v, u), [(4, 3, 2), (4, 3)]),
        (lambda v, a: ad.contract(v, a), [(4, 3, 2), (4, 2)]),
        (lambda a: ad.sum_(a, axis=0, keepdims=True) + ad.mean(a), [(3, 2)]),
    ],
)
def test_first_derivatives(op, shapes):
    check(op, *shapes)


def test_take_and_scatter_are_adjoint():
    idx = np.array([0, 2, 2, 1, 0])
    seg = Segments(idx, 3)
    check(lambda a: ad.take(a, seg), (3, 2))
    check(lambda a: ad.scatter(a, seg), (5, 2))
    x = np.arange(10.0).reshape(5, 2)
    expect = np.zeros((3, 2))
    np.add.at(expect, idx, x)
    np.testing.assert_allclose(ad.scatter(Tensor(x), seg).data, expect)


def test_second_derivative_through_graph():
    # d/dw of (d/dx sum(silu(x w)^2)) against finite differences of the first gradient
    rng = np.random.default_rng(3)
    x0 = rng.normal(size=(4, 3))
    w0 = rng.normal(size=(3, 2))

    def inner_grad(w):
        x = Tensor(x0, requires_grad=True)
        y = ad.sum_(ad.silu(x @ Tensor(w)) ** 2)
        (gx,) = ad.grad(y, [x])
        return gx.data

    x = Tensor(x0, requires_grad=True)
    w = Tensor(w0, requires_grad=True)
    y = ad.sum_(ad.silu(x @ w) ** 2)
    (gx,) = ad.grad(y, [x], create_graph=True)
    probe = rng.normal(size=x0.shape)
    (gw,) = ad.grad(ad.sum_(gx * probe), [w])
    num = numgrad(lambda wk: float(np.sum(inner_grad(wk) * probe)), w0.copy())
    np.testing.assert_allclose(gw.data, num, rtol=1e-6, atol=1e-8)


def test_unused_input_gets_zero_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    ga, gb = ad.grad(ad.sum_(a * 2.0), [a, b])
    np.testing.assert_array_equal(ga.data, 2.0)
    np.testing.assert_array_equal(gb.data, 0.0)


def test_no_grad_records_nothing():
    a = Tensor(np.ones(3), requires_grad=True)
    with ad.no_grad():
        y = ad.sum_(a * a)
    assert not y.requires_grad
