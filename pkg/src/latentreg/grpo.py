"""Group-relative policy optimization over the latent Gaussian policy.

Rewards and advantages are plain floats (no gradient); the relative
log-likelihoods carry gradients into the policy mean and log-std only, since
each latent sample is detached before it is scored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .fields import compose, njd_percent, warp_labels
from .network import LatentPolicy, log_pi, sample_latent
from .objectives import hard_dice


class GroupError(ValueError):
    pass


@dataclass
class RewardWeights:
    w_dice: float = 50.0
    w_njd: float = -100.0

    def __post_init__(self):
        if not self.w_dice > 0:
            raise ValueError(f"w_dice must be > 0, got {self.w_dice}")
        if not self.w_njd < 0:
            raise ValueError(f"w_njd must be < 0, got {self.w_njd}")


@dataclass
class TauSchedule:
    initial: float = 1.0
    decay: float = 0.95
    floor: float = 0.1

    def at(self, epoch: int) -> float:
        return max(self.floor, self.initial * self.decay ** epoch)


@dataclass
class GrpoConfig:
    trajectories: int = 6
    steps: int = 3
    lr: float = 1e-4
    epochs: int = 30
    lambda_warm: float = 0.8
    lambda_dice: float = 5.0
    tau: TauSchedule = field(default_factory=TauSchedule)
    ldvn: bool = True
    reward: RewardWeights = field(default_factory=RewardWeights)
    eps: float = 1e-8
    clip_norm: float | None = 1.0
    augment: bool = True
    # False drops the policy term and runs one deterministic (z = mu) trajectory
    use_policy: bool = True

    def __post_init__(self):
        if isinstance(self.tau, dict):
            self.tau = TauSchedule(**self.tau)
        if isinstance(self.reward, dict):
            self.reward = RewardWeights(**self.reward)
        if self.use_policy and self.trajectories < 2:
            raise ValueError("group statistics need at least 2 trajectories")
        if self.trajectories < 1 or self.steps < 1:
            raise ValueError("trajectories and steps must be >= 1")


def reward(fixed_labels, moving_labels, field_prev, field_cand, weights: RewardWeights,
           num_classes: int | None = None) -> tuple[float, dict[str, float]]:
    """Dice increment of the candidate total field over the previous one, plus
    the weighted folding fraction. Dice and NJD enter as fractions in [0, 1]."""
    dice_prev = hard_dice(fixed_labels, warp_labels(moving_labels, field_prev), num_classes) / 100.0
    dice_cand = hard_dice(fixed_labels, warp_labels(moving_labels, field_cand), num_classes) / 100.0
    njd = njd_percent(field_cand) / 100.0
    r = weights.w_dice * (dice_cand - dice_prev) + weights.w_njd * njd
    return r, {"dice": dice_cand, "dice_prev": dice_prev, "njd": njd}


def advantages(rewards, eps: float = 1e-8) -> np.ndarray:
    """``(R - mean) / (population std + eps)`` over one group."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.size < 2:
        raise GroupError(f"advantages need a group of at least 2 rewards, got {r.size}")
    return (r - r.mean()) / (r.std() + eps)


def ldvn_scale(n: int) -> float:
    if n < 1:
        raise ValueError(f"latent dimension must be >= 1, got {n}")
    return math.sqrt(n)


def center(values: list[Var]) -> list[Var]:
    """Subtract the group mean from each scalar."""
    mean = ad.sum(ad.stack(values)) * (1.0 / len(values))
    return [v - mean for v in values]


def relative_log_likelihoods(policy: LatentPolicy, zs, s: float) -> list[Var]:
    """Group-centered scaled log-likelihoods of samples from the shared policy."""
    return center([log_pi(policy, ad.value_of(z), s) for z in zs])


def policy_loss(advs, rel_log_liks: list[Var]) -> Var:
    """``-(1/J) * sum(A_j * rel_log_lik_j)`` with the advantages held constant."""
    advs = np.asarray(ad.value_of(advs) if isinstance(advs, Var) else advs, dtype=np.float64)
    if advs.shape != (len(rel_log_liks),):
        raise GroupError(f"{advs.size} advantages for {len(rel_log_liks)} log-likelihoods")
    j = len(rel_log_liks)
    return ad.sum(ad.stack(rel_log_liks) * Var(advs)) * (-1.0 / j)


def grpo_total_loss(pol_loss, warm_loss, dice_losses, lambda_warm: float, lambda_dice: float) -> Var:
    """Policy loss plus weighted warm-up and trajectory-mean soft-Dice losses."""
    if isinstance(dice_losses, (list, tuple)):
        dice = ad.sum(ad.stack(dice_losses)) * (1.0 / len(dice_losses))
    else:
        dice = ad.lift(dice_losses)
    return ad.lift(pol_loss) + ad.lift(warm_loss) * lambda_warm + dice * lambda_dice


def greedy_select(rewards) -> int:
    """Index of the highest reward; ties go to the smallest index."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.size < 1:
        raise GroupError("cannot select from an empty group")
    return int(np.argmax(r))


@dataclass
class Trajectory:
    eps: np.ndarray
    z: np.ndarray
    step_field: Var
    total_field: Var
    reward: float = 0.0
    components: dict = field(default_factory=dict)
    advantage: float = 0.0
    rel_log_lik: float = 0.0


@dataclass
class TrajectoryGroup:
    trajectories: list[Trajectory]
    mean_reward: float = 0.0
    std_reward: float = 0.0
    mean_log_pi: float = 0.0

    @property
    def size(self) -> int:
        return len(self.trajectories)


def build_group(policy: LatentPolicy, decode, field_prev: np.ndarray, fixed_labels, moving_labels,
                rng: np.random.Generator, config: GrpoConfig,
                num_classes: int | None = None) -> tuple[TrajectoryGroup, list[Var], Var | None]:
    """Sample J latents from ``policy``, decode and score them.

    Returns the group, the per-trajectory total fields (with gradients), and
    the policy loss (None when the policy term is disabled).
    """
    j_count = config.trajectories if config.use_policy else 1
    trajs = []
    for _ in range(j_count):
        if config.use_policy:
            z, eps = sample_latent(policy, rng)
        else:
            z, eps = policy.mu, np.zeros(policy.mu.shape)
        step = decode(z)
        total = compose(field_prev, step)
        trajs.append(Trajectory(eps=eps, z=ad.value_of(z).copy(), step_field=step, total_field=total))
    for t in trajs:
        t.reward, t.components = reward(fixed_labels, moving_labels, field_prev,
                                        t.total_field.value, config.reward, num_classes)
    group = TrajectoryGroup(trajs)
    rewards = np.array([t.reward for t in trajs])
    group.mean_reward = float(rewards.mean())
    group.std_reward = float(rewards.std())
    pol = None
    if config.use_policy:
        s = ldvn_scale(policy.n) if config.ldvn else 1.0
        raw = [log_pi(policy, t.z, s) for t in trajs]
        group.mean_log_pi = float(np.mean([v.item() for v in raw]))
        rel = center(raw)
        advs = advantages(rewards, config.eps)
        for t, a, lp in zip(trajs, advs, rel):
            t.advantage = float(a)
            t.rel_log_lik = lp.item()
        pol = policy_loss(advs, rel)
    return group, [t.total_field for t in trajs], pol
