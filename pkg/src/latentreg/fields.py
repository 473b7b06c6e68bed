"""Displacement-field algebra.

A displacement field is an array of shape ``(3, D, H, W)`` in voxel units with
component order ``(dd, dh, dw)``. Warping samples the source at
``index + displacement``; samples outside the grid clamp to the border, so a
constant volume is a fixed point of every warp.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .tensor import DTYPE, ShapeError


def identity_field(shape) -> np.ndarray:
    return np.zeros((3,) + tuple(shape), dtype=DTYPE)


def _check_field(u_shape, spatial, op: str) -> None:
    if len(u_shape) != 4 or u_shape[0] != 3 or tuple(u_shape[1:]) != tuple(spatial):
        raise ShapeError(op, u_shape, (3,) + tuple(spatial),
                         "field must be (3, D, H, W) matching the volume")


class _Sampler:
    """Trilinear sampling geometry for one displacement field."""

    def __init__(self, u: np.ndarray):
        spatial = u.shape[1:]
        self.spatial = spatial
        grid = np.indices(spatial, dtype=DTYPE)
        self.idx0 = []
        self.idx1 = []
        self.frac = []
        self.inside = []
        for k, n in enumerate(spatial):
            p = grid[k] + u[k]
            self.inside.append(((p >= 0.0) & (p <= n - 1.0)).astype(DTYPE))
            finite = np.isfinite(p)
            p = np.clip(np.where(finite, p, 0.0), 0.0, n - 1.0)
            if n == 1:
                i0 = np.zeros(p.shape, dtype=np.intp)
                i1 = i0
                t = np.zeros_like(p)
            else:
                i0 = np.minimum(np.floor(p).astype(np.intp), n - 2)
                i1 = i0 + 1
                t = p - i0
            # non-finite displacements poison their voxel instead of indexing garbage
            t = np.where(finite, t, np.nan)
            self.idx0.append(i0)
            self.idx1.append(i1)
            self.frac.append(t)
        d, h, w = spatial
        self.corners = []
        for a in (0, 1):
            for b in (0, 1):
                for c in (0, 1):
                    ia = (self.idx0, self.idx1)[a][0]
                    ib = (self.idx0, self.idx1)[b][1]
                    ic = (self.idx0, self.idx1)[c][2]
                    flat = ((ia * h) + ib) * w + ic
                    self.corners.append(((a, b, c), flat.ravel()))

    def _weight(self, bits, skip: int | None = None) -> np.ndarray:
        out = np.ones(self.spatial, dtype=DTYPE)
        for k, bit in enumerate(bits):
            if k == skip:
                continue
            t = self.frac[k]
            out = out * (t if bit else 1.0 - t)
        return out

    def sample(self, vol: np.ndarray) -> np.ndarray:
        c = vol.shape[0]
        flat = vol.reshape(c, -1)
        out = np.zeros((c,) + self.spatial, dtype=DTYPE)
        for bits, idx in self.corners:
            out += self._weight(bits) * flat[:, idx].reshape((c,) + self.spatial)
        return out

    def grad_vol(self, g: np.ndarray) -> np.ndarray:
        c = g.shape[0]
        size = int(np.prod(self.spatial))
        idx = np.concatenate([i for _, i in self.corners])
        weights = [self._weight(bits).ravel() for bits, _ in self.corners]
        out = np.empty((c, size), dtype=DTYPE)
        for ch in range(c):
            gc = g[ch].ravel()
            out[ch] = np.bincount(idx, weights=np.concatenate([w * gc for w in weights]),
                                  minlength=size)
        return out.reshape((c,) + self.spatial)

    def grad_u(self, vol: np.ndarray, g: np.ndarray) -> np.ndarray:
        c = vol.shape[0]
        flat = vol.reshape(c, -1)
        out = np.zeros((3,) + self.spatial, dtype=DTYPE)
        for bits, idx in self.corners:
            vals = flat[:, idx].reshape((c,) + self.spatial)
            gv = np.einsum("c...,c...->...", g, vals)
            for k in range(3):
                sign = 1.0 if bits[k] else -1.0
                out[k] += sign * self._weight(bits, skip=k) * gv
        for k in range(3):
            out[k] *= self.inside[k]
        return out


def warp_volume(vol, u, mode: str = "trilinear"):
    """Resample ``vol`` (C, D, H, W) or (D, H, W) at ``index + u``.

    Trilinear mode is differentiable in both arguments and returns a
    :class:`Var` when either input is one; nearest mode is evaluation-only and
    preserves the input dtype (use it for label maps).
    """
    if mode == "nearest":
        return _warp_nearest(ad.value_of(vol) if isinstance(vol, Var) else np.asarray(vol),
                             ad.value_of(u))
    if mode != "trilinear":
        raise ValueError(f"unknown warp mode {mode!r}")
    track = isinstance(vol, Var) or isinstance(u, Var)
    vol_v = ad.value_of(vol)
    u_v = ad.value_of(u)
    squeeze = vol_v.ndim == 3
    if squeeze:
        vol_v = vol_v[None]
    _check_field(u_v.shape, vol_v.shape[1:], "warp_volume")
    sampler = _Sampler(u_v)
    out = sampler.sample(vol_v)
    if not track:
        return out[0] if squeeze else out
    parents = []
    if isinstance(vol, Var):
        if squeeze:
            parents.append((vol, lambda g: sampler.grad_vol(g[None])[0]))
        else:
            parents.append((vol, sampler.grad_vol))
    if isinstance(u, Var):
        if squeeze:
            parents.append((u, lambda g: sampler.grad_u(vol_v, g[None])))
        else:
            parents.append((u, lambda g: sampler.grad_u(vol_v, g)))
    return Var.from_op(out[0] if squeeze else out, parents)


def _warp_nearest(vol: np.ndarray, u: np.ndarray) -> np.ndarray:
    squeeze = vol.ndim == 3
    v = vol[None] if squeeze else vol
    _check_field(u.shape, v.shape[1:], "warp_volume")
    spatial = v.shape[1:]
    grid = np.indices(spatial, dtype=DTYPE)
    idx = []
    for k, n in enumerate(spatial):
        p = grid[k] + u[k]
        # non-finite displacements sample the origin; callers see the NaN through the loss
        p = np.clip(np.where(np.isfinite(p), p, 0.0), 0.0, n - 1.0)
        idx.append(np.floor(p + 0.5).astype(np.intp))
    out = v[:, idx[0], idx[1], idx[2]]
    return out[0] if squeeze else out


def warp_labels(labels: np.ndarray, u) -> np.ndarray:
    return _warp_nearest(np.asarray(labels), ad.value_of(u))


def compose(u_prev, u_step):
    """Total field of warping by ``u_prev`` first, then by ``u_step``.

    ``u_total(x) = u_step(x) + u_prev(x + u_step(x))`` so that
    ``warp(V, u_total) ~ warp(warp(V, u_prev), u_step)``.
    """
    a = ad.value_of(u_prev)
    b = ad.value_of(u_step)
    if a.shape != b.shape:
        raise ShapeError("compose", a.shape, b.shape)
    _check_field(a.shape, a.shape[1:], "compose")
    sampled = warp_volume(u_prev, u_step, "trilinear")
    if isinstance(sampled, Var) or isinstance(u_step, Var):
        return ad.add(u_step, sampled)
    return b + sampled


def spatial_gradients(u: np.ndarray) -> np.ndarray:
    """Forward differences ``g[i, j] = d u_i / d x_j`` with the last valid
    difference repeated at the trailing boundary. Shape ``(3, 3, D, H, W)``."""
    u = np.asarray(u, dtype=DTYPE)
    if u.ndim != 4 or u.shape[0] != 3:
        raise ShapeError("jacobian_determinant", u.shape, (3, "D", "H", "W"))
    if min(u.shape[1:]) < 2:
        raise ShapeError("jacobian_determinant", u.shape, (3, 2, 2, 2),
                         "every spatial extent must be >= 2")
    out = np.empty((3, 3) + u.shape[1:], dtype=DTYPE)
    for j in range(3):
        d = np.diff(u, axis=1 + j)
        last = np.take(d, [-1], axis=1 + j)
        out[:, j] = np.concatenate([d, last], axis=1 + j)
    return out


def jacobian_determinant(u) -> np.ndarray:
    """Per-voxel ``det(I + grad u)``."""
    g = spatial_gradients(ad.value_of(u))
    a = g + np.eye(3).reshape(3, 3, 1, 1, 1)
    return (a[0, 0] * (a[1, 1] * a[2, 2] - a[1, 2] * a[2, 1])
            - a[0, 1] * (a[1, 0] * a[2, 2] - a[1, 2] * a[2, 0])
            + a[0, 2] * (a[1, 0] * a[2, 1] - a[1, 1] * a[2, 0]))


def njd_percent(u) -> float:
    """Percentage of voxels whose Jacobian determinant is negative."""
    det = jacobian_determinant(u)
    return 100.0 * float(np.count_nonzero(det < 0)) / det.size
