"""Warm-up and GRPO trainers, multi-step inference and evaluation."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .fields import compose, identity_field, njd_percent, warp_labels, warp_volume
from .grpo import GrpoConfig, build_group, greedy_select, grpo_total_loss
from .network import RegNet
from .objectives import WarmupWeights, hard_dice, soft_dice_loss, warmup_loss
from .synthdata import Pair

log = logging.getLogger(__name__)


class NumericAbort(RuntimeError):
    """Training produced a non-finite loss; ``dump`` holds diagnostics."""

    def __init__(self, message: str, dump: dict):
        self.dump = dump
        super().__init__(message)


class PreflightError(RuntimeError):
    """A configuration would exceed the memory budget."""


class Adam:
    def __init__(self, params: dict[str, ad.Var], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = None):
        self.params = params
        self.clip_norm = clip_norm
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(v.value) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.value) for k, v in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        if self.lr == 0:
            return
        if self.clip_norm is not None:
            total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > self.clip_norm:
                grads = {k: g * (self.clip_norm / total) for k, g in grads.items()}
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p.value = p.value - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def grad_norms(grads: dict[str, np.ndarray]) -> dict[str, float]:
    return {k: float(np.linalg.norm(g)) for k, g in grads.items()}


def _check_finite(loss: float, stage: str, context: dict, grads=None) -> None:
    if not math.isfinite(loss):
        dump = {"stage": stage, "loss": repr(loss), **context}
        if grads is not None:
            dump["grad_norms"] = grad_norms(grads)
        raise NumericAbort(f"non-finite loss during {stage}", dump)


# ----------------------------------------------------------------------------
# augmentation


def augment_pair(pair: Pair, rng: np.random.Generator) -> Pair:
    """Random axis permutation, per-axis flips and a moving/fixed swap.

    Images and labels move together; the ground-truth field is permuted and
    sign-flipped to match, and dropped when the roles are swapped.
    """
    perm = rng.permutation(3)
    flips = rng.random(3) < 0.5
    swap = bool(rng.random() < 0.5)

    def vol(a):
        if a is None:
            return None
        a = np.transpose(a, perm)
        for ax in range(3):
            if flips[ax]:
                a = np.flip(a, ax)
        return np.ascontiguousarray(a)

    true = None
    if pair.true_field is not None and not swap:
        comps = [vol(pair.true_field[perm[ax]]) * (-1.0 if flips[ax] else 1.0) for ax in range(3)]
        true = np.stack(comps)
    mv, fx = vol(pair.moving), vol(pair.fixed)
    ml, fl = vol(pair.moving_labels), vol(pair.fixed_labels)
    if swap:
        mv, fx, ml, fl = fx, mv, fl, ml
    return Pair(mv, fx, ml, fl, true, pair.pair_id)


# ----------------------------------------------------------------------------
# evaluation


@dataclass
class PairResult:
    pair_id: str
    dice: list[float]  # per step, percent; index 0 is the identity field
    njd: list[float]  # per step, percent
    field: np.ndarray | None = None


def infer_multistep(net: RegNet, pair: Pair, steps: int, num_classes: int | None = None,
                    keep_field: bool = False) -> PairResult:
    """Deterministic (z = mu) multi-step registration of one pair.

    Each step re-encodes the moving image warped by the running total field
    and composes the predicted step field onto it.
    """
    total = identity_field(pair.moving.shape)
    has_labels = pair.moving_labels is not None and pair.fixed_labels is not None
    dice = [hard_dice(pair.fixed_labels, pair.moving_labels, num_classes)] if has_labels else []
    njd = [0.0]
    for _ in range(steps):
        state = warp_volume(pair.moving, total)
        step = net.predict(state, pair.fixed)
        total = compose(total, step)
        if has_labels:
            dice.append(hard_dice(pair.fixed_labels, warp_labels(pair.moving_labels, total), num_classes))
        njd.append(njd_percent(total))
    return PairResult(pair.pair_id, dice, njd, total if keep_field else None)


def evaluate(net: RegNet, pairs: Sequence[Pair], steps: int = 1,
             num_classes: int | None = None) -> dict:
    results = [infer_multistep(net, p, steps, num_classes) for p in pairs]
    dice = np.array([r.dice[-1] for r in results])
    njd = np.array([r.njd[-1] for r in results])
    return {
        "steps": steps,
        "dice_mean": float(dice.mean()),
        "dice_std": float(dice.std()),
        "njd_mean": float(njd.mean()),
        "njd_std": float(njd.std()),
        "per_step_dice": [float(np.mean([r.dice[t] for r in results])) for t in range(steps + 1)],
        "per_step_njd": [float(np.mean([r.njd[t] for r in results])) for t in range(steps + 1)],
        "pairs": [{"id": r.pair_id, "dice": r.dice[-1], "njd": r.njd[-1]} for r in results],
    }


# ----------------------------------------------------------------------------
# warm-up


@dataclass
class WarmupConfig:
    epochs: int = 20
    lr: float = 1e-3
    weights: WarmupWeights = field(default_factory=WarmupWeights)
    clip_norm: float | None = 1.0
    augment: bool = True

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = WarmupWeights(**self.weights)


def warmup_step(net: RegNet, opt: Adam, pair: Pair, weights: WarmupWeights) -> dict[str, float]:
    feats, policy = net.encode(pair.moving, pair.fixed, tau=0.0)
    u = net.decode(feats, policy.mu)
    loss, parts = warmup_loss(pair.fixed, pair.moving, u, policy, weights)
    grads = ad.backward(loss, net.params)
    _check_finite(loss.item(), "warmup", {"pair": pair.pair_id, **parts}, grads)
    opt.step(grads)
    return {"loss": loss.item(), **parts}


def run_warmup(net: RegNet, train: Sequence[Pair], val: Sequence[Pair], config: WarmupConfig,
               seed: int = 0, num_classes: int | None = None,
               on_epoch: Callable[[dict], None] | None = None) -> list[dict]:
    """Unsupervised warm-up (images only; labels of ``val`` are used for monitoring)."""
    opt = Adam(net.params, lr=config.lr, clip_norm=config.clip_norm)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        sums: dict[str, float] = {}
        for i in order:
            pair = augment_pair(train[i], rng) if config.augment else train[i]
            parts = warmup_step(net, opt, pair, config.weights)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
        row = {"epoch": epoch, **{k: v / len(train) for k, v in sums.items()}}
        if val:
            ev = evaluate(net, val, 1, num_classes)
            row.update(val_dice=ev["dice_mean"], val_njd=ev["njd_mean"])
        row["tau"] = 0.0
        history.append(row)
        log.info("warmup epoch %d loss %.5f", epoch, row["loss"])
        if on_epoch:
            on_epoch(row)
    return history


# ----------------------------------------------------------------------------
# GRPO fine-tuning


def estimate_step_bytes(spatial, channels: Sequence[int], trajectories: int) -> int:
    """Rough float64 activation footprint of one GRPO step.

    Each decode keeps its upsampled, concatenated, convolved and warped
    activations alive until backward; the im2col windows of the largest
    convolution dominate.
    """
    vox = int(np.prod(spatial))
    c0 = channels[0]
    per_decode = 0
    for lvl, c in enumerate(channels[:-1]):
        lvl_vox = vox // (8 ** lvl)
        c_in = channels[lvl + 1] + c if lvl + 1 < len(channels) else c
        per_decode += lvl_vox * (c_in * 28 + 4 * c)
    per_decode += vox * (c0 * 27 + 3 * 8 + 16)
    encoder = sum((vox // (8 ** lvl)) * c * 30 for lvl, c in enumerate(channels))
    return 8 * (encoder + (trajectories + 1) * per_decode)


def preflight(spatial, channels, trajectories: int, budget_mb: float) -> int:
    need = estimate_step_bytes(spatial, channels, trajectories)
    if need > budget_mb * 2 ** 20:
        raise PreflightError(f"estimated {need / 2 ** 20:.0f} MiB per step exceeds the "
                             f"{budget_mb:.0f} MiB budget (J={trajectories}, grid={tuple(spatial)})")
    return need


def grpo_step(net: RegNet, opt: Adam, pair: Pair, field_prev: np.ndarray, tau: float,
              config: GrpoConfig, warm_weights: WarmupWeights, rng: np.random.Generator,
              num_classes: int | None = None):
    """One inner step: sample, score, update, then greedy state update."""
    state = warp_volume(pair.moving, field_prev)
    feats, policy = net.encode(state, pair.fixed, tau=tau if config.use_policy else 0.0)

    def decode(z):
        return net.decode(feats, z)

    group, totals, pol = build_group(policy, decode, field_prev, pair.fixed_labels,
                                     pair.moving_labels, rng, config, num_classes)
    dice_losses = [soft_dice_loss(pair.fixed_labels, pair.moving_labels, t, num_classes) for t in totals]
    if config.use_policy:
        step_mu = decode(policy.mu)
    else:
        step_mu = group.trajectories[0].step_field
    total_mu = compose(field_prev, step_mu)
    warm, warm_parts = warmup_loss(pair.fixed, pair.moving, step_mu, policy, warm_weights,
                                   similarity_field=total_mu)
    pol_term = pol if pol is not None else ad.Var(0.0)
    loss = grpo_total_loss(pol_term, warm, dice_losses, config.lambda_warm, config.lambda_dice)
    grads = ad.backward(loss, net.params)
    parts = {
        "loss": loss.item(),
        "policy": pol_term.item(),
        "warm": warm.item(),
        "dice_loss": float(np.mean([d.item() for d in dice_losses])),
        **warm_parts,
    }
    _check_finite(loss.item(), "grpo", {"pair": pair.pair_id, **parts}, grads)
    opt.step(grads)
    j_star = greedy_select([t.reward for t in group.trajectories])
    new_field = group.trajectories[j_star].total_field.value.copy()
    return new_field, group, j_star, parts


def run_grpo(net: RegNet, train: Sequence[Pair], val: Sequence[Pair], config: GrpoConfig,
             warm_weights: WarmupWeights, seed: int = 0, num_classes: int | None = None,
             eval_steps: int | None = None, on_epoch: Callable[[dict], None] | None = None,
             trajectory_log=None) -> list[dict]:
    """Multi-trajectory multi-step fine-tuning, one update per (pair, step).

    ``trajectory_log`` is an optional text stream receiving one JSON line per
    (pair, step, trajectory).
    """
    opt = Adam(net.params, lr=config.lr, clip_norm=config.clip_norm)
    rng = np.random.default_rng(seed)
    eval_steps = config.steps if eval_steps is None else eval_steps
    history = []
    for epoch in range(config.epochs):
        tau = config.tau.at(epoch)
        order = rng.permutation(len(train))
        sums: dict[str, float] = {}
        logpi_std = []
        count = 0
        for i in order:
            pair = augment_pair(train[i], rng) if config.augment else train[i]
            field_prev = identity_field(pair.moving.shape)
            for t in range(1, config.steps + 1):
                field_prev, group, j_star, parts = grpo_step(
                    net, opt, pair, field_prev, tau, config, warm_weights, rng, num_classes)
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v
                count += 1
                if config.use_policy:
                    logpi_std.append(float(np.std([tr.rel_log_lik for tr in group.trajectories])))
                if trajectory_log is not None:
                    for j, tr in enumerate(group.trajectories):
                        trajectory_log.write(json.dumps({
                            "epoch": epoch, "pair": pair.pair_id, "step": t, "trajectory": j,
                            "seed": seed, "reward": tr.reward, "dice": tr.components["dice"],
                            "dice_prev": tr.components["dice_prev"], "njd": tr.components["njd"],
                            "advantage": tr.advantage, "rel_log_pi": tr.rel_log_lik,
                            "selected": j == j_star,
                        }, sort_keys=True) + "\n")
        row = {"epoch": epoch, **{k: v / count for k, v in sums.items()}, "tau": tau}
        row["logpi_std"] = float(np.mean(logpi_std)) if logpi_std else 0.0
        if val:
            ev = evaluate(net, val, eval_steps, num_classes)
            row.update(val_dice=ev["dice_mean"], val_njd=ev["njd_mean"])
        history.append(row)
        log.info("grpo epoch %d loss %.5f val dice %.2f", epoch, row["loss"], row.get("val_dice", float("nan")))
        if on_epoch:
            on_epoch(row)
    return history
