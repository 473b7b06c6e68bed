"""Dense float64 array kernels: elementwise maps, reductions, direct 3D
convolution and trilinear upsampling, plus the adjoints autodiff needs.

Arrays are plain ``numpy.ndarray`` in row-major order. Volumes are laid out
``(C, D, H, W)``; no broadcasting beyond tensor-with-scalar is supported.
Convolution follows the cross-correlation convention (no kernel flip).
Division by zero is not trapped and follows IEEE semantics.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when array shapes are incompatible for an operation."""

    def __init__(self, op: str, a_shape, b_shape, detail: str = ""):
        self.op = op
        self.a_shape = tuple(a_shape)
        self.b_shape = tuple(b_shape)
        msg = f"{op}: incompatible shapes {self.a_shape} and {self.b_shape}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


def as_tensor(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": np.divide,
}
_UNARY = {
    "exp": np.exp,
    "log": np.log,
    "tanh": np.tanh,
    "square": np.square,
}


def elementwise(op: str, a, b=None, *, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Apply ``op`` per element. ``b`` must match ``a``'s shape or be a scalar."""
    a = as_tensor(a)
    if op in _BINARY:
        b = as_tensor(b)
        if b.ndim != 0 and b.shape != a.shape:
            raise ShapeError(op, a.shape, b.shape)
        with np.errstate(divide="ignore", invalid="ignore"):
            return _BINARY[op](a, b)
    if op in _UNARY:
        with np.errstate(divide="ignore", invalid="ignore"):
            return _UNARY[op](a)
    if op == "clip":
        if lo is None or hi is None or not lo < hi:
            raise ValueError(f"clip needs lo < hi, got lo={lo}, hi={hi}")
        return np.clip(a, lo, hi)
    raise ValueError(f"unknown elementwise op {op!r}")


def reduce(op: str, a, axes=None, keepdims: bool = False):
    """Reduce over ``axes`` (None means all). An empty axis list is an identity copy.

    ``argmax`` accepts a single axis or None (flat index).
    """
    a = as_tensor(a)
    if axes is not None and not isinstance(axes, int) and len(axes) == 0:
        return a.copy()
    if isinstance(axes, list):
        axes = tuple(axes)
    if op == "sum":
        return np.sum(a, axis=axes, keepdims=keepdims)
    if op == "mean":
        return np.mean(a, axis=axes, keepdims=keepdims)
    if op == "max":
        return np.max(a, axis=axes, keepdims=keepdims)
    if op == "argmax":
        if isinstance(axes, tuple):
            if len(axes) != 1:
                raise ValueError("argmax reduces over one axis at a time")
            axes = axes[0]
        return np.argmax(a, axis=axes, keepdims=keepdims)
    raise ValueError(f"unknown reduction {op!r}")


# ----------------------------------------------------------------------------
# convolution


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, padding: int) -> None:
    if x.ndim != 4:
        raise ShapeError("conv3d", x.shape, w.shape, "input must be (C, D, H, W)")
    if w.ndim != 5 or not (w.shape[2] == w.shape[3] == w.shape[4]):
        raise ShapeError("conv3d", x.shape, w.shape, "kernel must be (C_out, C_in, k, k, k)")
    if w.shape[1] != x.shape[0]:
        raise ShapeError("conv3d", x.shape, w.shape,
                         f"input has {x.shape[0]} channels, kernel expects {w.shape[1]}")
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    k = w.shape[2]
    if any(n + 2 * padding < k for n in x.shape[1:]):
        raise ShapeError("conv3d", x.shape, w.shape, "kernel larger than padded input")


def _windows(xp: np.ndarray, k: int, stride: int) -> np.ndarray:
    win = sliding_window_view(xp, (k, k, k), axis=(1, 2, 3))
    return win[:, ::stride, ::stride, ::stride]


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    p = padding
    return np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))


def conv3d(x, w, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Direct 3D cross-correlation of ``x`` (C_in, D, H, W) with ``w`` (C_out, C_in, k, k, k)."""
    x = as_tensor(x)
    w = as_tensor(w)
    _check_conv(x, w, stride, padding)
    k = w.shape[2]
    win = _windows(_pad(x, padding), k, stride)
    out = np.tensordot(w, win, axes=([1, 2, 3, 4], [0, 4, 5, 6]))
    if bias is not None:
        out += as_tensor(bias).reshape(-1, 1, 1, 1)
    return out


def conv3d_grad_weight(x, grad_out, k: int, stride: int = 1, padding: int = 0) -> np.ndarray:
    win = _windows(_pad(as_tensor(x), padding), k, stride)
    return np.tensordot(grad_out, win, axes=([1, 2, 3], [1, 2, 3]))


def conv3d_grad_input(x_shape, w, grad_out, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Adjoint of :func:`conv3d` with respect to its input."""
    w = as_tensor(w)
    k = w.shape[2]
    c_in, d, h, wd = x_shape
    cols = np.tensordot(w, grad_out, axes=([0], [0]))  # (C_in, k, k, k, Do, Ho, Wo)
    do, ho, wo = grad_out.shape[1:]
    gxp = np.zeros((c_in, d + 2 * padding, h + 2 * padding, wd + 2 * padding), dtype=DTYPE)
    s = stride
    for a in range(k):
        for b in range(k):
            for c in range(k):
                gxp[:, a:a + s * (do - 1) + 1:s, b:b + s * (ho - 1) + 1:s,
                    c:c + s * (wo - 1) + 1:s] += cols[:, a, b, c]
    if padding:
        p = padding
        gxp = gxp[:, p:p + d, p:p + h, p:p + wd]
    return gxp


# ----------------------------------------------------------------------------
# trilinear upsampling (align-corners false, border clamp)


@lru_cache(maxsize=64)
def interp_matrix(n: int, factor: int) -> np.ndarray:
    """Linear interpolation weights mapping ``n`` samples to ``n * factor``.

    Destination index ``i`` reads source coordinate ``(i + 0.5) / factor - 0.5``
    clamped to ``[0, n - 1]``.
    """
    m = np.zeros((n * factor, n), dtype=DTYPE)
    for i in range(n * factor):
        src = min(max((i + 0.5) / factor - 0.5, 0.0), n - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        t = src - i0
        m[i, i0] += 1.0 - t
        m[i, i1] += t
    m.setflags(write=False)
    return m


def _apply_along(x: np.ndarray, mats) -> np.ndarray:
    for axis, m in zip((1, 2, 3), mats):
        x = np.moveaxis(np.tensordot(m, x, axes=([1], [axis])), 0, axis)
    return x


def upsample_trilinear(x, factor: int) -> np.ndarray:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample_trilinear", x.shape, (), "input must be (C, D, H, W)")
    if factor < 2:
        raise ValueError(f"factor must be >= 2, got {factor}")
    mats = [interp_matrix(n, factor) for n in x.shape[1:]]
    return _apply_along(x, mats)


def upsample_trilinear_adjoint(grad_out, in_shape, factor: int) -> np.ndarray:
    mats = [interp_matrix(n, factor).T for n in in_shape[1:]]
    return _apply_along(as_tensor(grad_out), mats)
