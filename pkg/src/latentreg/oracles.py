"""Brute-force references for tests and acceptance runs.

Nothing here calls into the kernels it checks: Dice and NJD are counted with
explicit voxel loops, log-likelihoods use the scalar Gaussian density, and
gradients come from central differences.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass
class FdConfig:
    h: float = 1e-5
    rtol: float = 1e-4

    def __post_init__(self):
        if self.h <= 0:
            raise ValueError("finite-difference step must be positive")


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5,
                indices: Sequence[tuple] | None = None) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``.

    With ``indices`` only those coordinates are probed (others stay 0).
    """
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    coords = indices if indices is not None else list(np.ndindex(x.shape))
    for idx in coords:
        orig = x[idx]
        x[idx] = orig + h
        fp = float(f(x))
        x[idx] = orig - h
        fm = float(f(x))
        x[idx] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"non-finite function value near index {idx}")
        g[idx] = (fp - fm) / (2 * h)
    return g


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """max |a - b| / max(|a|, |b|, floor), elementwise."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def brute_dice(fixed_labels, warped_labels, num_classes: int) -> float:
    """Mean foreground Dice (percent) by nested voxel loops."""
    a = np.asarray(fixed_labels).tolist()
    b = np.asarray(warped_labels).tolist()
    d, h, w = len(a), len(a[0]), len(a[0][0])
    na = [0] * (num_classes + 1)
    nb = [0] * (num_classes + 1)
    both = [0] * (num_classes + 1)
    for i in range(d):
        for j in range(h):
            for k in range(w):
                x, y = a[i][j][k], b[i][j][k]
                na[x] += 1
                nb[y] += 1
                if x == y:
                    both[x] += 1
    scores = []
    for c in range(1, num_classes + 1):
        if na[c] + nb[c] == 0:
            continue
        scores.append(200.0 * both[c] / (na[c] + nb[c]))
    return sum(scores) / len(scores) if scores else 100.0


def _fwd(u, comp, axis, i, j, k, shape):
    """Forward difference of component ``comp`` along ``axis`` with the last
    difference repeated at the trailing edge."""
    idx = [i, j, k]
    n = shape[axis]
    lo = idx[axis] if idx[axis] < n - 1 else n - 2
    a = list(idx)
    b = list(idx)
    a[axis] = lo
    b[axis] = lo + 1
    return u[comp][b[0]][b[1]][b[2]] - u[comp][a[0]][a[1]][a[2]]


def brute_jacobian(u) -> np.ndarray:
    arr = np.asarray(u, dtype=np.float64)
    shape = arr.shape[1:]
    lst = arr.tolist()
    out = np.empty(shape)
    for i in range(shape[0]):
        for j in range(shape[1]):
            for k in range(shape[2]):
                m = [[(1.0 if r == c else 0.0) + _fwd(lst, r, c, i, j, k, shape) for c in range(3)]
                     for r in range(3)]
                out[i, j, k] = (m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]))
    return out


def brute_njd(u) -> float:
    det = brute_jacobian(u)
    neg = sum(1 for v in det.ravel().tolist() if v < 0)
    return 100.0 * neg / det.size


def gaussian_log_density(x: float, mean: float, std: float) -> float:
    return -0.5 * ((x - mean) / std) ** 2 - math.log(std) - 0.5 * math.log(2 * math.pi)


def scalar_log_pi(z, mu, log_sigma, tau: float, s: float = 1.0) -> float:
    """Sum of per-dimension Gaussian log densities with std ``tau * sigma``, divided by ``s``."""
    total = 0.0
    for zi, mi, li in zip(np.ravel(z).tolist(), np.ravel(mu).tolist(), np.ravel(log_sigma).tolist()):
        total += gaussian_log_density(zi, mi, tau * math.exp(li))
    return total / s


@dataclass
class ProbeRow:
    n: int
    std_unscaled: float
    std_scaled: float


def ldvn_variance_probe(ns: Sequence[int], groups: int = 256, j: int = 6,
                        seed: int = 0) -> tuple[list[ProbeRow], float]:
    """Within-group std of centered log-likelihoods for a standard-normal policy.

    With mu = 0, sigma = 1, tau = 1 every summand is ``0.5 * (eps^2 + log 2 pi)``.
    Returns one row per ``n`` and the log-log least-squares exponent of the
    unscaled series.
    """
    if j < 2:
        raise ValueError("need at least two trajectories per group")
    rng = np.random.default_rng(seed)
    half_log_2pi = 0.5 * math.log(2 * math.pi)
    rows = []
    for n in ns:
        centered = np.empty((groups, j))
        for g in range(groups):
            eps = rng.standard_normal((j, n))
            lp = -(0.5 * np.square(eps).sum(axis=1) + n * half_log_2pi)
            centered[g] = lp - lp.mean()
        std_unscaled = float(np.sqrt(np.mean(centered ** 2)))
        rows.append(ProbeRow(int(n), std_unscaled, std_unscaled / math.sqrt(n)))
    logs_n = np.log([r.n for r in rows])
    logs_s = np.log([r.std_unscaled for r in rows])
    exponent = float(np.polyfit(logs_n, logs_s, 1)[0]) if len(rows) > 1 else float("nan")
    return rows, exponent


def probe_csv(rows: Sequence[ProbeRow], exponent: float) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["N", "std_unscaled", "std_scaled", "exponent"])
    for r in rows:
        writer.writerow([r.n, repr(r.std_unscaled), repr(r.std_scaled), repr(exponent)])
    return buf.getvalue()
