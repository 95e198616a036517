import numpy as np
import pytest

from mgno.autodiff import CompGraph, EvalGraph
from mgno.tensor import (BoundaryMode, gelu_grad_cnhw, conv2d_cnhw,
                         conv2d_backward_cnhw, conv_transpose2d_cnhw,
                         conv_transpose2d_backward_cnhw, pad_cnhw,
                         pad_backward_cnhw)
from dense_oracle import conv_matrix

D = BoundaryMode.DIRICHLET_ZERO
N = BoundaryMode.NEUMANN_REFLECT
P = BoundaryMode.PERIODIC_CIRCULAR
MODES = [D, N, P]


def central_diff(fn, arr, step=1e-6):
    g = np.zeros_like(arr)
    flat = arr.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + step
        lp = fn()
        flat[i] = keep - step
        lm = fn()
        flat[i] = keep
        gf[i] = (lp - lm) / (2 * step)
    return g


# ------------------------------------------------------ adjoint consistency

@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_input_adjoint(mode, stride):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 1, 8, 8))
    w = rng.standard_normal((3, 2, 3, 3))
    y = conv2d_cnhw(x, w, mode, stride)
    v = rng.standard_normal(y.shape)
    gx, _ = conv2d_backward_cnhw(v, x, w, mode, stride)
    assert abs(np.sum(y * v) - np.sum(x * gx)) < 1e-12


@pytest.mark.parametrize("mode", MODES)
def test_pad_adjoint(mode):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 1, 5, 6))
    y = pad_cnhw(x, mode)
    v = rng.standard_normal(y.shape)
    gx = pad_backward_cnhw(v, mode)
    assert abs(np.sum(y * v) - np.sum(x * gx)) < 1e-12


def test_conv_transpose_adjoint():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 1, 4, 4))
    w = rng.standard_normal((3, 2, 4, 4))
    y = conv_transpose2d_cnhw(x, w)
    v = rng.standard_normal(y.shape)
    gx, _ = conv_transpose2d_backward_cnhw(v, x, w)
    assert abs(np.sum(y * v) - np.sum(x * gx)) < 1e-12


# --------------------------------------------------------- kernel gradients

def test_conv_kernel_grad_matches_dense_assembly():
    # gradient of ||k * u||^2 w.r.t. k against an explicit dense-matrix form
    rng = np.random.default_rng(3)
    u = rng.standard_normal((1, 1, 3, 3))
    k = rng.standard_normal((1, 1, 3, 3))
    y = conv2d_cnhw(u, k, D, 1)
    gk = conv2d_backward_cnhw(2.0 * y, u, k, D, 1)[1]

    # dense route: y = M(k) u with M linear in k; d||y||^2/dk_i = 2 y^T M_i u
    gk_dense = np.zeros(9)
    for i in range(9):
        basis = np.zeros((1, 1, 3, 3))
        basis.reshape(-1)[i] = 1.0
        m_i = conv_matrix(basis, D, 1, 3, 3)
        gk_dense[i] = 2.0 * float(y.reshape(-1) @ (m_i @ u.reshape(-1)))
    np.testing.assert_allclose(gk.reshape(-1), gk_dense, atol=1e-10)


@pytest.mark.parametrize("mode", MODES)
@pytest.mark.parametrize("stride", [1, 2])
def test_conv_kernel_grad_finite_difference(mode, stride):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 1, 6, 6))
    w = rng.standard_normal((2, 2, 3, 3))
    t = rng.standard_normal(conv2d_cnhw(x, w, mode, stride).shape)

    def loss():
        y = conv2d_cnhw(x, w, mode, stride)
        return float(np.sum((y - t) ** 2))

    y = conv2d_cnhw(x, w, mode, stride)
    _, gw = conv2d_backward_cnhw(2 * (y - t), x, w, mode, stride)
    fd = central_diff(loss, w)
    np.testing.assert_allclose(gw, fd, rtol=1e-6, atol=1e-8)


def test_conv_transpose_kernel_grad_finite_difference():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 1, 3, 3))
    w = rng.standard_normal((2, 1, 4, 4))
    t = rng.standard_normal((2, 1, 6, 6))

    def loss():
        y = conv_transpose2d_cnhw(x, w)
        return float(np.sum((y - t) ** 2))

    y = conv_transpose2d_cnhw(x, w)
    gx, gw = conv_transpose2d_backward_cnhw(2 * (y - t), x, w)
    np.testing.assert_allclose(gw, central_diff(loss, w), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gx, central_diff(loss, x), rtol=1e-6, atol=1e-8)


# ----------------------------------------------------------------- gelu

def test_gelu_derivative_at_zero():
    g = gelu_grad_cnhw(np.zeros((1, 1, 1, 1)))
    assert abs(g[0, 0, 0, 0] - 0.5) < 1e-12


def test_gelu_grad_finite_difference():
    x = np.linspace(-4, 4, 33).reshape(1, 1, 3, 11)
    from mgno.tensor import gelu_cnhw
    step = 1e-6
    fd = (gelu_cnhw(x + step) - gelu_cnhw(x - step)) / (2 * step)
    np.testing.assert_allclose(gelu_grad_cnhw(x), fd, atol=1e-9)


# -------------------------------------------------------------- graph level

def test_graph_composite_finite_difference():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((1, 1, 6, 6))
    w1 = rng.standard_normal((2, 1, 3, 3)) * 0.5
    w2 = rng.standard_normal((1, 2, 3, 3)) * 0.5
    bmat = rng.standard_normal((2, 2)) * 0.3
    bvec = rng.standard_normal(2) * 0.1
    target = rng.standard_normal((1, 1, 6, 6))

    def value(w1v, w2v, bmv, bvv):
        g = EvalGraph()
        h = g.conv2d(x, w1v, D, 1)
        h = g.gelu(g.channel_mix(h, bmv, bvv))
        out = g.conv2d(h, w2v, D, 1)
        return float(EvalGraph.mean_sq_rel(out, target, "h1", h=0.1))

    g = CompGraph()
    xn = g.leaf(x, requires_grad=False)
    w1n, w2n, bmn, bvn = g.leaf(w1), g.leaf(w2), g.leaf(bmat), g.leaf(bvec)
    h = g.conv2d(xn, w1n, D, 1)
    h = g.gelu(g.channel_mix(h, bmn, bvn))
    out = g.conv2d(h, w2n, D, 1)
    loss = g.mean_sq_rel(out, target, "h1", h=0.1)
    assert abs(float(loss.value) - value(w1, w2, bmat, bvec)) < 1e-14
    g.backward(loss)

    for node, arr in [(w1n, w1), (w2n, w2), (bmn, bmat), (bvn, bvec)]:
        fd = central_diff(lambda: value(w1, w2, bmat, bvec), arr)
        np.testing.assert_allclose(node.grad, fd, rtol=2e-5, atol=1e-9)


def test_backward_requires_scalar():
    g = CompGraph()
    x = g.leaf(np.ones((1, 1, 2, 2)))
    y = g.gelu(x)
    with pytest.raises(ValueError):
        g.backward(y)


def test_input_leaf_without_grad_is_skipped():
    rng = np.random.default_rng(7)
    g = CompGraph()
    x = g.leaf(rng.standard_normal((1, 1, 4, 4)), requires_grad=False)
    w = g.leaf(rng.standard_normal((1, 1, 3, 3)))
    y = g.conv2d(x, w, D, 1)
    loss = g.mean_sq_rel(y, np.ones((1, 1, 4, 4)), "l2")
    g.backward(loss)
    assert x.grad is None
    assert w.grad is not None


def test_loss_zero_target_rejected():
    g = CompGraph()
    x = g.leaf(np.ones((1, 1, 2, 2)))
    with pytest.raises(ZeroDivisionError):
        g.mean_sq_rel(x, np.zeros((1, 1, 2, 2)), "l2")
