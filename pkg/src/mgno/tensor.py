"""Multi-channel 2D fields and convolution primitives.

Conventions used throughout the package:

* Fields are dense float64 arrays laid out channel-major: ``(c, d_y, d_x)``.
  Internally the batched routines use the channel-first layout
  ``(c, N, d_y, d_x)``: with channels leading, every convolution runs as a
  single GEMM against a ``(c*k*k, N*H*W)`` window matrix and neither operand
  nor result ever needs transposing.  The public ``Field`` type is the
  single-sample view (``N = 1``) of that layout.
* "Convolution" means cross-correlation (no kernel flip), the usual
  deep-learning convention.  All classical stencils used here are symmetric
  wherever the distinction would matter.
* Padding is always one ring wide and selected by :class:`BoundaryMode`:
  zeros (Dirichlet), mirror-without-edge (Neumann), wrap-around (periodic),
  or none.
* Transposed convolution is fixed at stride 2 with a 4x4 kernel; the raw
  ``2d+2`` output is trimmed by one cell per side so a ``d x d`` input maps
  to exactly ``2d x 2d``.  The adjoint of that map is a stride-2 convolution
  with one ring of zero padding, which is what the backward pass uses.

Everything is double precision; violating shape or mode preconditions raises
``ValueError``.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

__all__ = [
    "BoundaryMode", "Field", "Kernel",
    "pad", "conv2d", "conv_transpose2d", "gelu", "channel_mix",
]

_GELU_C0 = 0.7978845608028654  # sqrt(2/pi)
_GELU_C1 = 0.044715


class BoundaryMode(Enum):
    """Padding rule attached to a convolution."""

    DIRICHLET_ZERO = "dirichlet"
    NEUMANN_REFLECT = "neumann"
    PERIODIC_CIRCULAR = "periodic"
    NO_PAD = "none"

    @classmethod
    def parse(cls, name: str) -> "BoundaryMode":
        for mode in cls:
            if mode.value == name:
                return mode
        raise ValueError(f"unknown boundary mode {name!r}; "
                         f"expected one of {[m.value for m in cls]}")


@dataclass(frozen=True)
class Field:
    """A real multi-channel grid function, shape (channels, d_y, d_x)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"Field expects (channels, d_y, d_x), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"Field dimensions must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("Field contains non-finite values")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def d_y(self) -> int:
        return self.data.shape[1]

    @property
    def d_x(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class Kernel:
    """A convolution weight block, shape (out_channels, in_channels, k_h, k_w)."""

    weights: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.weights, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"Kernel expects (out, in, k_h, k_w), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"Kernel dimensions must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("Kernel contains non-finite values")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "weights", arr)

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def k_h(self) -> int:
        return self.weights.shape[2]

    @property
    def k_w(self) -> int:
        return self.weights.shape[3]


# ---------------------------------------------------------------------------
# array-level primitives on (C, N, H, W); these carry the actual numerics and
# are shared by the Field API, the multigrid cycle and the autodiff engine.
# ---------------------------------------------------------------------------

def pad_cnhw(x: np.ndarray, mode: BoundaryMode) -> np.ndarray:
    """Add one ring of padding per the boundary mode (last two axes)."""
    if mode is BoundaryMode.NO_PAD:
        raise ValueError("pad() requires a padded boundary mode, not NO_PAD")
    c, n, h, w = x.shape
    out = np.empty((c, n, h + 2, w + 2), dtype=np.float64)
    out[:, :, 1:-1, 1:-1] = x
    if mode is BoundaryMode.DIRICHLET_ZERO:
        out[:, :, 0, :] = 0.0
        out[:, :, -1, :] = 0.0
        out[:, :, :, 0] = 0.0
        out[:, :, :, -1] = 0.0
    elif mode is BoundaryMode.PERIODIC_CIRCULAR:
        out[:, :, 0, 1:-1] = x[:, :, -1, :]
        out[:, :, -1, 1:-1] = x[:, :, 0, :]
        out[:, :, 1:-1, 0] = x[:, :, :, -1]
        out[:, :, 1:-1, -1] = x[:, :, :, 0]
        out[:, :, 0, 0] = x[:, :, -1, -1]
        out[:, :, 0, -1] = x[:, :, -1, 0]
        out[:, :, -1, 0] = x[:, :, 0, -1]
        out[:, :, -1, -1] = x[:, :, 0, 0]
    elif mode is BoundaryMode.NEUMANN_REFLECT:
        # mirror about the edge sample, excluding the edge itself: pad[-1] = x[1];
        # a size-1 axis has no interior neighbour and degrades to replication
        ry, by = min(1, h - 1), max(h - 2, 0)
        rx, bx = min(1, w - 1), max(w - 2, 0)
        out[:, :, 0, 1:-1] = x[:, :, ry, :]
        out[:, :, -1, 1:-1] = x[:, :, by, :]
        out[:, :, 1:-1, 0] = x[:, :, :, rx]
        out[:, :, 1:-1, -1] = x[:, :, :, bx]
        out[:, :, 0, 0] = x[:, :, ry, rx]
        out[:, :, 0, -1] = x[:, :, ry, bx]
        out[:, :, -1, 0] = x[:, :, by, rx]
        out[:, :, -1, -1] = x[:, :, by, bx]
    else:  # pragma: no cover
        raise ValueError(f"unhandled mode {mode}")
    return out


def pad_backward_cnhw(g: np.ndarray, mode: BoundaryMode) -> np.ndarray:
    """Adjoint of :func:`pad_cnhw`: scatter ring gradients back to sources."""
    gx = g[:, :, 1:-1, 1:-1].copy()
    if mode is BoundaryMode.DIRICHLET_ZERO:
        return gx
    if mode is BoundaryMode.PERIODIC_CIRCULAR:
        gx[:, :, -1, :] += g[:, :, 0, 1:-1]
        gx[:, :, 0, :] += g[:, :, -1, 1:-1]
        gx[:, :, :, -1] += g[:, :, 1:-1, 0]
        gx[:, :, :, 0] += g[:, :, 1:-1, -1]
        gx[:, :, -1, -1] += g[:, :, 0, 0]
        gx[:, :, -1, 0] += g[:, :, 0, -1]
        gx[:, :, 0, -1] += g[:, :, -1, 0]
        gx[:, :, 0, 0] += g[:, :, -1, -1]
        return gx
    if mode is BoundaryMode.NEUMANN_REFLECT:
        h, w = gx.shape[2], gx.shape[3]
        ry, by = min(1, h - 1), max(h - 2, 0)
        rx, bx = min(1, w - 1), max(w - 2, 0)
        gx[:, :, ry, :] += g[:, :, 0, 1:-1]
        gx[:, :, by, :] += g[:, :, -1, 1:-1]
        gx[:, :, :, rx] += g[:, :, 1:-1, 0]
        gx[:, :, :, bx] += g[:, :, 1:-1, -1]
        gx[:, :, ry, rx] += g[:, :, 0, 0]
        gx[:, :, ry, bx] += g[:, :, 0, -1]
        gx[:, :, by, rx] += g[:, :, -1, 0]
        gx[:, :, by, bx] += g[:, :, -1, -1]
        return gx
    raise ValueError(f"unhandled mode {mode}")


def _check_conv_args(x: np.ndarray, w: np.ndarray, mode: BoundaryMode, stride: int) -> None:
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if w.shape[1] != x.shape[0]:
        raise ValueError(f"channel mismatch: field has {x.shape[0]}, "
                         f"kernel expects {w.shape[1]}")
    if stride == 2 and mode is not BoundaryMode.NO_PAD:
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ValueError(f"padded stride-2 convolution needs even spatial size, "
                             f"got {x.shape[2]}x{x.shape[3]}")
    kh, kw = w.shape[2], w.shape[3]
    p = 0 if mode is BoundaryMode.NO_PAD else 1
    if x.shape[2] + 2 * p < kh or x.shape[3] + 2 * p < kw:
        raise ValueError(f"field {x.shape[2]}x{x.shape[3]} too small for "
                         f"{kh}x{kw} kernel with mode {mode.value}")


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """Sliding windows of a padded (C, N, Hp, Wp) input as a GEMM operand.

    The window axes are ordered (C, kh, kw, N, Ho, Wo), so the gather copies
    whole output rows at a time and the reshape to (C*kh*kw, N*Ho*Wo) feeds
    one dense GEMM whose result is already in the native layout.
    """
    c, n, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    s0, s1, s2, s3 = xp.strides
    win = np.lib.stride_tricks.as_strided(
        xp,
        shape=(c, kh, kw, n, ho, wo),
        strides=(s0, s2, s3, s1, s2 * stride, s3 * stride),
        writeable=False,
    )
    return win.reshape(c * kh * kw, n * ho * wo), ho, wo


def conv2d_forward_ctx(x: np.ndarray, w: np.ndarray, mode: BoundaryMode, stride: int):
    """Forward convolution returning (output, context) for a later backward.

    The context keeps the im2col matrix so the backward pass does not repeat
    the window gather (the dominant memory cost at small channel counts).
    """
    _check_conv_args(x, w, mode, stride)
    if mode is BoundaryMode.NO_PAD:
        xp = x if x.flags.c_contiguous else np.ascontiguousarray(x)
    else:
        xp = pad_cnhw(x, mode)
    kh, kw = w.shape[2], w.shape[3]
    cols, ho, wo = _im2col(xp, kh, kw, stride)
    y = w.reshape(w.shape[0], -1) @ cols
    ctx = (cols, xp.shape, ho, wo)
    return y.reshape(w.shape[0], x.shape[1], ho, wo), ctx


def conv2d_cnhw(x: np.ndarray, w: np.ndarray, mode: BoundaryMode, stride: int) -> np.ndarray:
    """Batched 2D cross-correlation as a single GEMM."""
    out, _ = conv2d_forward_ctx(x, w, mode, stride)
    return out


def conv2d_backward_ctx(g: np.ndarray, ctx, w: np.ndarray, mode: BoundaryMode,
                        stride: int, need_gx: bool = True, need_gw: bool = True):
    """Gradients of conv2d w.r.t. input and kernel from a saved forward context.

    The input gradient is the exact adjoint of the forward map (including the
    padding rule), which is also how adjoint consistency is tested.
    """
    cols, xp_shape, ho, wo = ctx
    o, c, kh, kw = w.shape
    n = g.shape[1]
    gm = g.reshape(o, n * ho * wo)

    gw = None
    if need_gw:
        gw = (gm @ cols.T).reshape(o, c, kh, kw)

    gx = None
    if need_gx:
        gcols = w.reshape(o, -1).T @ gm
        gcols = gcols.reshape(c, kh, kw, n, ho, wo)
        gxp = np.zeros(xp_shape, dtype=np.float64)
        for a in range(kh):
            for b in range(kw):
                gxp[:, :, a:a + stride * ho:stride, b:b + stride * wo:stride] += \
                    gcols[:, a, b]
        if mode is BoundaryMode.NO_PAD:
            gx = gxp
        else:
            gx = pad_backward_cnhw(gxp, mode)
    return gx, gw


def conv2d_backward_cnhw(g: np.ndarray, x: np.ndarray, w: np.ndarray,
                         mode: BoundaryMode, stride: int):
    """Gradients of conv2d recomputing the forward context (test convenience)."""
    _, ctx = conv2d_forward_ctx(x, w, mode, stride)
    return conv2d_backward_ctx(g, ctx, w, mode, stride)


def conv_transpose2d_cnhw(x: np.ndarray, w: np.ndarray,
                          mode: BoundaryMode = BoundaryMode.DIRICHLET_ZERO) -> np.ndarray:
    """Stride-2 transposed convolution with a 4x4 kernel, reduced to 2d x 2d.

    The raw stamp is one ring larger than the target grid; that ring is
    resolved by the adjoint of the one-ring padding rule: dropped for
    Dirichlet (the plain trim), wrapped around for periodic, folded onto the
    mirror cells for Neumann.  The map is thereby the exact adjoint of the
    padded stride-2 convolution with the same mode, which keeps periodic
    configurations exactly translation-consistent.
    """
    if w.shape[2] != 4 or w.shape[3] != 4:
        raise ValueError(f"transposed convolution requires a 4x4 kernel, "
                         f"got {w.shape[2]}x{w.shape[3]}")
    if w.shape[1] != x.shape[0]:
        raise ValueError(f"channel mismatch: field has {x.shape[0]}, "
                         f"kernel expects {w.shape[1]}")
    c, n, h, wd = x.shape
    o = w.shape[0]
    # t[o, a, b, n, i, j] = sum_c w[o, c, a, b] * x[c, n, i, j]
    t = np.tensordot(w, x, axes=([1], [0]))
    if mode is BoundaryMode.PERIODIC_CIRCULAR:
        # scatter directly onto the torus with rolled strided slices; every
        # output cell then sums its contributions in the same order no matter
        # where it sits, which keeps circular shifts bitwise exact
        out = np.zeros((o, n, 2 * h, 2 * wd), dtype=np.float64)
        for a in range(4):
            for b in range(4):
                py, px = (a - 1) % 2, (b - 1) % 2
                sy, sx = (a - 1 - py) // 2, (b - 1 - px) // 2
                out[:, :, py::2, px::2] += np.roll(t[:, a, b], (sy, sx),
                                                   axis=(2, 3))
        return out
    if mode is BoundaryMode.NO_PAD:
        raise ValueError("transposed convolution needs a padded mode for its "
                         "ring fold")
    raw = np.zeros((o, n, 2 * h + 2, 2 * wd + 2), dtype=np.float64)
    for a in range(4):
        for b in range(4):
            raw[:, :, a:a + 2 * h:2, b:b + 2 * wd:2] += t[:, a, b]
    return np.ascontiguousarray(pad_backward_cnhw(raw, mode))


def conv_transpose2d_backward_cnhw(g: np.ndarray, x: np.ndarray, w: np.ndarray,
                                   mode: BoundaryMode = BoundaryMode.DIRICHLET_ZERO):
    """Gradients of conv_transpose2d w.r.t. input and kernel."""
    c, n, h, wd = x.shape
    o = w.shape[0]
    graw = pad_cnhw(g, mode)  # adjoint of the ring fold
    slices = np.empty((4, 4, o, n, h, wd), dtype=np.float64)
    for a in range(4):
        for b in range(4):
            slices[a, b] = graw[:, :, a:a + 2 * h:2, b:b + 2 * wd:2]
    # sum over (o, a, b) against w, then over (n, h, w) against x
    gx = np.tensordot(w, slices, axes=([0, 2, 3], [2, 0, 1]))
    gw = np.tensordot(slices, x, axes=([3, 4, 5], [1, 2, 3])).transpose(2, 3, 0, 1)
    return gx, gw


def gelu_cnhw(x: np.ndarray) -> np.ndarray:
    """GELU via the tanh approximation (deterministic across platforms)."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C0 * (x + _GELU_C1 * x ** 3)))


def gelu_tanh_cnhw(x: np.ndarray):
    """GELU value together with the inner tanh (reused by the backward pass)."""
    t = np.tanh(_GELU_C0 * (x + _GELU_C1 * x ** 3))
    return 0.5 * x * (1.0 + t), t


def gelu_grad_cnhw(x: np.ndarray, t: np.ndarray | None = None) -> np.ndarray:
    if t is None:
        t = np.tanh(_GELU_C0 * (x + _GELU_C1 * x ** 3))
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C0 * (1.0 + 3.0 * _GELU_C1 * x ** 2)


def channel_mix_cnhw(x: np.ndarray, bmat: np.ndarray, bvec: np.ndarray,
                     bias_field: np.ndarray | None = None) -> np.ndarray:
    """Per-pixel linear map across channels plus a constant-function bias.

    ``bmat`` may be rectangular (out x in) for the first network layer, whose
    bypass maps the raw input channels into the hidden width.  ``bias_field``
    replaces the constant function 1(x) when the discrete bias basis has to
    satisfy a boundary condition (boundary-preserving mode).
    """
    if bmat.ndim != 2 or bmat.shape[1] != x.shape[0]:
        raise ValueError(f"channel matrix must have {x.shape[0]} columns, "
                         f"got shape {bmat.shape}")
    if bvec.shape != (bmat.shape[0],):
        raise ValueError(f"bias vector must have length {bmat.shape[0]}, "
                         f"got {bvec.shape}")
    y = np.tensordot(bmat, x, axes=([1], [0]))
    if bias_field is None:
        y += bvec[:, None, None, None]
    else:
        y += bvec[:, None, None, None] * bias_field[None, None, :, :]
    return y


# ---------------------------------------------------------------------------
# public Field-level operations
# ---------------------------------------------------------------------------

def _finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise FloatingPointError(f"{what} produced non-finite values")
    return arr


def pad(f: Field, mode: BoundaryMode) -> Field:
    """Pad a field by one ring according to the boundary mode."""
    out = pad_cnhw(f.data[:, None], mode)[:, 0]
    return Field(_finite(out, "pad"))


def conv2d(f: Field, k: Kernel, mode: BoundaryMode, stride: int = 1) -> Field:
    """Cross-correlate a field with a kernel under the given padding rule."""
    out = conv2d_cnhw(f.data[:, None], k.weights, mode, stride)[:, 0]
    return Field(_finite(out, "conv2d"))


def conv_transpose2d(f: Field, k: Kernel, stride: int = 2) -> Field:
    """Stride-2 transposed convolution, trimmed to exactly double the size."""
    if stride != 2:
        raise ValueError("conv_transpose2d supports stride 2 only")
    out = conv_transpose2d_cnhw(f.data[:, None], k.weights)[:, 0]
    return Field(_finite(out, "conv_transpose2d"))


def gelu(f: Field) -> Field:
    return Field(gelu_cnhw(f.data))


def channel_mix(f: Field, bmat: np.ndarray, bvec: np.ndarray) -> Field:
    """Mix channels with an n x n matrix and add a constant bias per channel."""
    bmat = np.asarray(bmat, dtype=np.float64)
    bvec = np.asarray(bvec, dtype=np.float64)
    if bmat.shape != (f.channels, f.channels):
        raise ValueError(f"channel matrix must be {f.channels}x{f.channels}, "
                         f"got {bmat.shape}")
    out = channel_mix_cnhw(f.data[:, None], bmat, bvec)[:, 0]
    return Field(_finite(out, "channel_mix"))
