"""Loss terms and overlap metrics.

Differentiable terms return scalar :class:`~latentreg.autodiff.Var` values.
Label maps are integer arrays with 0 as background and classes ``1..K``;
background never enters a Dice score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .fields import warp_volume
from .network import LatentPolicy
from .tensor import DTYPE, ShapeError

DICE_SMOOTH = 1e-5


@dataclass
class WarmupWeights:
    lambda_reg: float = 0.5
    beta_kl: float = 1e-3

    def __post_init__(self):
        for name in ("lambda_reg", "beta_kl"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {v}")


def mse_similarity(fixed, warped) -> Var:
    f, w = ad.lift(fixed), ad.lift(warped)
    if f.shape != w.shape:
        raise ShapeError("mse_similarity", f.shape, w.shape)
    return ad.mean(ad.square(f - w))


def diffusion_regularizer(u) -> Var:
    """Mean squared forward difference of the field, averaged over the three axes."""
    u = ad.lift(u)
    if u.ndim != 4 or min(u.shape[1:]) < 2:
        raise ShapeError("diffusion_regularizer", u.shape, (3, 2, 2, 2),
                         "every spatial extent must be >= 2")
    total = None
    for axis in (1, 2, 3):
        hi = [slice(None)] * 4
        lo = [slice(None)] * 4
        hi[axis] = slice(1, None)
        lo[axis] = slice(None, -1)
        d = ad.getitem(u, tuple(hi)) - ad.getitem(u, tuple(lo))
        term = ad.mean(ad.square(d))
        total = term if total is None else total + term
    return total * (1.0 / 3.0)


def kl_to_standard_normal(policy: LatentPolicy) -> Var:
    """Per-dimension mean of KL(N(mu, sigma^2) || N(0, 1)), evaluated at tau = 0."""
    mu, ls = policy.mu, policy.log_sigma
    n = mu.value.size
    terms = ad.square(mu) + ad.exp(ls * 2.0) - ls * 2.0 - 1.0
    return ad.sum(terms) * (1.0 / (2.0 * n))


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Foreground one-hot channels ``(K, D, H, W)`` for classes ``1..K``."""
    labels = np.asarray(labels)
    if labels.size and int(labels.max()) > num_classes:
        raise ValueError(f"label {int(labels.max())} exceeds class count {num_classes}")
    return np.stack([(labels == k).astype(DTYPE) for k in range(1, num_classes + 1)])


def soft_dice_loss(fixed_labels, moving_labels, u, num_classes: int | None = None) -> Var:
    """1 - mean soft Dice between ``fixed_labels`` and the trilinearly warped
    one-hot of ``moving_labels``."""
    fl, ml = np.asarray(fixed_labels), np.asarray(moving_labels)
    if fl.shape != ml.shape:
        raise ShapeError("soft_dice_loss", fl.shape, ml.shape)
    if num_classes is None:
        num_classes = int(max(fl.max(), ml.max(), 1))
    if num_classes < 1:
        raise ValueError("need at least one foreground class")
    target = one_hot(fl, num_classes)
    warped = warp_volume(Var(one_hot(ml, num_classes)), u, "trilinear")
    warped = ad.lift(warped)
    inter = ad.sum(warped * Var(target), axes=(1, 2, 3))
    denom = ad.sum(warped, axes=(1, 2, 3)) + Var(target.sum(axis=(1, 2, 3)) + DICE_SMOOTH)
    dice = (inter * 2.0 + DICE_SMOOTH) / denom
    return 1.0 - ad.mean(dice)


def hard_dice(fixed_labels, warped_labels, num_classes: int | None = None) -> float:
    """Mean foreground Dice in percent.

    Classes empty in both maps are skipped; empty in exactly one score 0.
    Returns 100 when every class is skipped.
    """
    a, b = np.asarray(fixed_labels), np.asarray(warped_labels)
    if a.shape != b.shape:
        raise ShapeError("hard_dice", a.shape, b.shape)
    if num_classes is None:
        num_classes = int(max(a.max(initial=0), b.max(initial=0)))
    scores = []
    for k in range(1, num_classes + 1):
        ma, mb = a == k, b == k
        na, nb = int(ma.sum()), int(mb.sum())
        if na == 0 and nb == 0:
            continue
        scores.append(200.0 * int(np.count_nonzero(ma & mb)) / (na + nb))
    return float(np.mean(scores)) if scores else 100.0


def warmup_loss(fixed, moving, u, policy: LatentPolicy, weights: WarmupWeights,
                similarity_field=None) -> tuple[Var, dict[str, float]]:
    """``mse + lambda_reg * diffusion + beta_kl * KL`` and the component values.

    ``u`` is the field fed to the regularizer; ``similarity_field`` (default
    ``u``) is the field used to warp ``moving`` before comparing with ``fixed``.
    """
    sim_u = u if similarity_field is None else similarity_field
    warped = warp_volume(moving, sim_u, "trilinear")
    sim = mse_similarity(fixed, warped)
    reg = diffusion_regularizer(u)
    kl = kl_to_standard_normal(policy)
    total = sim + reg * weights.lambda_reg + kl * weights.beta_kl
    parts = {"mse": sim.item(), "reg": reg.item(), "kl": kl.item()}
    return total, parts
