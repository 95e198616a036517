"""Minimal reverse-mode differentiation over the tensor primitives.

A :class:`CompGraph` records every primitive as it executes; nodes are
appended in execution order, so walking the list backwards visits them in
exact reverse topological order.  Each node stores the forward value and a
closure that scatters its output gradient to its parents using the
hand-derived adjoints in :mod:`mgno.tensor`.

:class:`EvalGraph` exposes the same operation set but works directly on
arrays without recording, so forward-only code paths (inference, the
classical solver) share one implementation of the network and V-cycle.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import BoundaryMode

__all__ = ["Node", "CompGraph", "EvalGraph"]


class Node:
    """One recorded value in the computation graph."""

    __slots__ = ("value", "grad", "needs_grad", "bw")

    def __init__(self, value, needs_grad=False, bw=None):
        self.value = value
        self.grad = None
        self.needs_grad = needs_grad
        self.bw = bw

    def accumulate(self, g) -> None:
        if self.grad is None:
            self.grad = g
        else:
            self.grad += g


class CompGraph:
    """Recording graph: run the forward pass through its methods, then call
    :meth:`backward` on a scalar loss node to populate leaf gradients.

    Leaves created with ``requires_grad=False`` (inputs, targets) prune the
    corresponding adjoint computations.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    # -- construction -------------------------------------------------------

    def leaf(self, value, requires_grad: bool = True) -> Node:
        node = Node(np.asarray(value, dtype=np.float64), needs_grad=requires_grad)
        self.nodes.append(node)
        return node

    def _emit(self, value, parents, bw) -> Node:
        needs = any(p.needs_grad for p in parents)
        node = Node(value, needs_grad=needs, bw=bw if needs else None)
        self.nodes.append(node)
        return node

    # -- primitives ----------------------------------------------------------

    def pad(self, x: Node, mode: BoundaryMode) -> Node:
        def bw(node):
            if x.needs_grad:
                x.accumulate(T.pad_backward_cnhw(node.grad, mode))
        return self._emit(T.pad_cnhw(x.value, mode), (x,), bw)

    def conv2d(self, x: Node, k: Node, mode: BoundaryMode, stride: int) -> Node:
        value, ctx = T.conv2d_forward_ctx(x.value, k.value, mode, stride)

        def bw(node):
            gx, gw = T.conv2d_backward_ctx(node.grad, ctx, k.value, mode, stride,
                                           need_gx=x.needs_grad,
                                           need_gw=k.needs_grad)
            if gx is not None:
                x.accumulate(gx)
            if gw is not None:
                k.accumulate(gw)
        return self._emit(value, (x, k), bw)

    def conv_transpose2d(self, x: Node, k: Node,
                         mode: BoundaryMode = BoundaryMode.DIRICHLET_ZERO) -> Node:
        def bw(node):
            gx, gw = T.conv_transpose2d_backward_cnhw(node.grad, x.value, k.value,
                                                      mode)
            if x.needs_grad:
                x.accumulate(gx)
            if k.needs_grad:
                k.accumulate(gw)
        return self._emit(T.conv_transpose2d_cnhw(x.value, k.value, mode),
                          (x, k), bw)

    def gelu(self, x: Node) -> Node:
        value, t = T.gelu_tanh_cnhw(x.value)

        def bw(node):
            if x.needs_grad:
                x.accumulate(node.grad * T.gelu_grad_cnhw(x.value, t))
        return self._emit(value, (x,), bw)

    def channel_mix(self, x: Node, bmat: Node, bvec: Node,
                    bias_field: np.ndarray | None = None) -> Node:
        def bw(node):
            g = node.grad
            if x.needs_grad:
                x.accumulate(np.tensordot(bmat.value, g, axes=([0], [0])))
            if bmat.needs_grad:
                bmat.accumulate(np.tensordot(g, x.value, axes=([1, 2, 3], [1, 2, 3])))
            if bvec.needs_grad:
                if bias_field is None:
                    bvec.accumulate(g.sum(axis=(1, 2, 3)))
                else:
                    bvec.accumulate(np.tensordot(g, bias_field,
                                                 axes=([2, 3], [0, 1])).sum(axis=1))
        value = T.channel_mix_cnhw(x.value, bmat.value, bvec.value, bias_field)
        return self._emit(value, (x, bmat, bvec), bw)

    def add(self, a: Node, b: Node) -> Node:
        def bw(node):
            if a.needs_grad:
                a.accumulate(node.grad)
            if b.needs_grad:
                b.accumulate(node.grad)
        return self._emit(a.value + b.value, (a, b), bw)

    def sub(self, a: Node, b: Node) -> Node:
        def bw(node):
            if a.needs_grad:
                a.accumulate(node.grad)
            if b.needs_grad:
                b.accumulate(-node.grad)
        return self._emit(a.value - b.value, (a, b), bw)

    def scale(self, x: Node, alpha: float) -> Node:
        def bw(node):
            if x.needs_grad:
                x.accumulate(alpha * node.grad)
        return self._emit(alpha * x.value, (x,), bw)

    def mask(self, x: Node, mask_hw: np.ndarray) -> Node:
        def bw(node):
            if x.needs_grad:
                x.accumulate(node.grad * mask_hw[None, None])
        return self._emit(x.value * mask_hw[None, None], (x,), bw)

    def mean_sq_rel(self, pred: Node, target: np.ndarray, kind: str,
                    h: float = 1.0) -> Node:
        """Batch mean of the squared relative L2 or H1 error.

        Fields are (C, N, H, W); samples live on axis 1.  The backward pass
        applies the adjoint forward-difference scatter for the derivative
        terms of the H1 norm.
        """
        e = pred.value - target
        num = _sq_norms(e, kind, h)
        den = _sq_norms(target, kind, h)
        if np.any(den == 0.0):
            raise ZeroDivisionError("relative error undefined: zero-norm target sample")
        n = e.shape[1]
        value = np.float64(np.mean(num / den))

        def bw(node):
            if not pred.needs_grad:
                return
            g = node.grad  # scalar
            w = ((2.0 * g / n) / den)[None, :, None, None]
            grad = e * w
            if kind == "h1":
                grad = grad + _dx_adj(_dx(e, h), h) * w
                grad = grad + _dy_adj(_dy(e, h), h) * w
            pred.accumulate(grad)

        return self._emit(value, (pred,), bw)

    # -- reverse sweep -------------------------------------------------------

    def backward(self, loss: Node) -> None:
        """Seed the scalar loss with gradient 1 and sweep the tape in reverse.

        Visits nodes in exact reverse creation (= topological) order; each
        node's closure is dropped right after it fires so saved forward
        buffers are released as the sweep proceeds.
        """
        if np.shape(loss.value) != ():
            raise ValueError(f"backward() needs a scalar loss node, "
                             f"got shape {np.shape(loss.value)}")
        loss.grad = np.float64(1.0)
        for node in reversed(self.nodes):
            if node.bw is not None and node.grad is not None:
                node.bw(node)
                node.bw = None


class EvalGraph:
    """Same operation surface as CompGraph, acting on bare arrays."""

    @staticmethod
    def leaf(value):
        return np.asarray(value, dtype=np.float64)

    @staticmethod
    def pad(x, mode):
        return T.pad_cnhw(x, mode)

    @staticmethod
    def conv2d(x, k, mode, stride):
        return T.conv2d_cnhw(x, k, mode, stride)

    @staticmethod
    def conv_transpose2d(x, k, mode=BoundaryMode.DIRICHLET_ZERO):
        return T.conv_transpose2d_cnhw(x, k, mode)

    @staticmethod
    def gelu(x):
        return T.gelu_cnhw(x)

    @staticmethod
    def channel_mix(x, bmat, bvec, bias_field=None):
        return T.channel_mix_cnhw(x, bmat, bvec, bias_field)

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def sub(a, b):
        return a - b

    @staticmethod
    def scale(x, alpha):
        return alpha * x

    @staticmethod
    def mask(x, mask_hw):
        return x * mask_hw[None, None]

    @staticmethod
    def mean_sq_rel(pred, target, kind, h=1.0):
        e = pred - target
        num = _sq_norms(e, kind, h)
        den = _sq_norms(target, kind, h)
        if np.any(den == 0.0):
            raise ZeroDivisionError("relative error undefined: zero-norm target sample")
        return np.float64(np.mean(num / den))


def _sq_norms(v: np.ndarray, kind: str, h: float) -> np.ndarray:
    """Per-sample squared L2 or H1 norms of a (C, N, H, W) stack."""
    if kind == "l2":
        return np.sum(v * v, axis=(0, 2, 3))
    if kind == "h1":
        return (np.sum(v * v, axis=(0, 2, 3))
                + np.sum(_dx(v, h) ** 2, axis=(0, 2, 3))
                + np.sum(_dy(v, h) ** 2, axis=(0, 2, 3)))
    raise ValueError(f"unknown loss kind {kind!r}")


# forward differences (last row/column dropped) and their adjoints

def _dx(u: np.ndarray, h: float) -> np.ndarray:
    return (u[..., :, 1:] - u[..., :, :-1]) / h


def _dy(u: np.ndarray, h: float) -> np.ndarray:
    return (u[..., 1:, :] - u[..., :-1, :]) / h


def _dx_adj(v: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros(v.shape[:-1] + (v.shape[-1] + 1,), dtype=np.float64)
    out[..., :, 1:] += v / h
    out[..., :, :-1] -= v / h
    return out


def _dy_adj(v: np.ndarray, h: float) -> np.ndarray:
    out = np.zeros(v.shape[:-2] + (v.shape[-2] + 1, v.shape[-1]), dtype=np.float64)
    out[..., 1:, :] += v / h
    out[..., :-1, :] -= v / h
    return out
