"""Miniature U-Net registration backbone with a sampleable Gaussian latent.

The top encoder feature feeds two 1x1x1 heads producing the latent mean
(``tanh`` bounded by ``lambda_scale``) and a clipped log standard deviation.
The decoder consumes the skip features plus a latent sample ``z``.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .tensor import DTYPE, ShapeError

LEAKY_SLOPE = 0.2


@dataclass
class BackboneConfig:
    levels: int = 3
    channels: list[int] = field(default_factory=lambda: [8, 16, 32])
    in_channels: int = 2
    # 3x3x3 convolutions per encoder and decoder level (the first one of an
    # encoder level does the downsampling)
    convs_per_level: int = 1
    lambda_scale: float = 10.0
    sigma_min: float = -10.0
    sigma_max: float = 3.0

    def __post_init__(self):
        if len(self.channels) != self.levels:
            raise ValueError(f"channels {self.channels} must have one entry per level ({self.levels})")
        if self.levels < 2:
            raise ValueError("need at least two levels for a skip connection")
        if not self.sigma_min < self.sigma_max:
            raise ValueError("sigma_min must be below sigma_max")
        if self.lambda_scale <= 0:
            raise ValueError("lambda_scale must be positive")
        if self.convs_per_level < 1:
            raise ValueError("need at least one convolution per level")

    def latent_shape(self, spatial) -> tuple[int, ...]:
        f = 2 ** (self.levels - 1)
        return (self.channels[-1],) + tuple(n // f for n in spatial)

    def latent_dim(self, spatial) -> int:
        return int(np.prod(self.latent_shape(spatial)))


@dataclass
class LatentPolicy:
    """Gaussian policy over the latent: mean, clipped log-std, temperature."""

    mu: Var
    log_sigma: Var
    lambda_scale: float
    sigma_min: float
    sigma_max: float
    tau: float = 0.0

    @property
    def n(self) -> int:
        return int(self.mu.value.size)

    @property
    def sigma(self) -> Var:
        return ad.exp(self.log_sigma)


def sample_latent(policy: LatentPolicy, rng) -> tuple[Var, np.ndarray]:
    """Reparameterized sample ``z = mu + tau * sigma * eps``.

    ``rng`` is a ``numpy.random.Generator`` or an integer seed. With ``tau == 0``
    the returned ``z`` is ``mu`` itself.
    """
    if policy.tau < 0:
        raise ValueError(f"tau must be >= 0, got {policy.tau}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    eps = rng.standard_normal(policy.mu.shape)
    if policy.tau == 0:
        return policy.mu, eps
    z = policy.mu + policy.sigma * Var(policy.tau * eps)
    return z, eps


def log_pi(policy: LatentPolicy, z, s: float = 1.0) -> Var:
    """Scaled Gaussian log-likelihood of a detached sample ``z``.

    ``-(1/2s) * sum(((z - mu) / (tau sigma))^2 + log(2 pi tau^2 sigma^2))``
    """
    if s <= 0:
        raise ValueError(f"scale s must be positive, got {s}")
    tau = policy.tau
    if tau <= 0:
        raise ValueError("log-likelihood is undefined at tau == 0")
    z = ad.value_of(z)
    if z.shape != policy.mu.shape:
        raise ShapeError("log_pi", z.shape, policy.mu.shape)
    resid = (Var(z) - policy.mu) * ad.exp(-policy.log_sigma) * (1.0 / tau)
    log_var = policy.log_sigma * 2.0 + (math.log(2.0 * math.pi) + 2.0 * math.log(tau))
    return ad.sum(ad.square(resid) + log_var) * (-0.5 / s)


def _he(rng, shape, gain=math.sqrt(2.0 / (1 + LEAKY_SLOPE ** 2))):
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * (gain / math.sqrt(fan_in))


class RegNet:
    """Encoder / Gaussian heads / decoder with named float64 parameters."""

    def __init__(self, config: BackboneConfig | None = None, seed: int = 0):
        self.config = config or BackboneConfig()
        self.params: dict[str, Var] = {}
        rng = np.random.default_rng(seed)
        ch = self.config.channels
        c_in = self.config.in_channels
        extra = self.config.convs_per_level - 1
        for lvl, c in enumerate(ch):
            self._add(f"enc{lvl}.w", _he(rng, (c, c_in, 3, 3, 3)))
            self._add(f"enc{lvl}.b", np.zeros(c))
            for k in range(extra):
                self._add(f"enc{lvl}_{k + 1}.w", _he(rng, (c, c, 3, 3, 3)))
                self._add(f"enc{lvl}_{k + 1}.b", np.zeros(c))
            c_in = c
        c_top = ch[-1]
        self._add("mu_head.w", 0.1 * _he(rng, (c_top, c_top, 1, 1, 1), gain=1.0))
        self._add("mu_head.b", np.zeros(c_top))
        self._add("logsig_head.w", 1e-3 * _he(rng, (c_top, c_top, 1, 1, 1), gain=1.0))
        self._add("logsig_head.b", np.zeros(c_top))
        c_up = c_top
        for lvl in range(self.config.levels - 2, -1, -1):
            c_out = ch[lvl]
            self._add(f"dec{lvl}.w", _he(rng, (c_out, c_up + ch[lvl], 3, 3, 3)))
            self._add(f"dec{lvl}.b", np.zeros(c_out))
            for k in range(extra):
                self._add(f"dec{lvl}_{k + 1}.w", _he(rng, (c_out, c_out, 3, 3, 3)))
                self._add(f"dec{lvl}_{k + 1}.b", np.zeros(c_out))
            c_up = c_out
        # zero flow head: the untrained network predicts the identity transform
        self._add("flow.w", np.zeros((3, ch[0], 3, 3, 3)))
        self._add("flow.b", np.zeros(3))

    def _add(self, name: str, value) -> None:
        self.params[name] = Var(np.asarray(value, dtype=DTYPE), requires_grad=True, name=name)

    def check_input(self, spatial) -> None:
        f = 2 ** (self.config.levels - 1)
        if any(n % f for n in spatial):
            raise ShapeError("encode", tuple(spatial), (f, f, f),
                             f"spatial extents must be divisible by {f}")

    def encode(self, moving, fixed, tau: float = 0.0) -> tuple[list[Var], LatentPolicy]:
        """Features ``f_1..f_{L-1}`` and the latent policy for the pair."""
        mv, fx = ad.value_of(moving), ad.value_of(fixed)
        if mv.shape != fx.shape:
            raise ShapeError("encode", mv.shape, fx.shape)
        self.check_input(mv.shape)
        p = self.params
        x = Var(np.stack([mv, fx]))
        feats = []
        for lvl in range(self.config.levels):
            stride = 1 if lvl == 0 else 2
            x = ad.leaky_relu(ad.conv3d(x, p[f"enc{lvl}.w"], p[f"enc{lvl}.b"], stride=stride, padding=1),
                              LEAKY_SLOPE)
            x = self._extra_convs(x, f"enc{lvl}")
            feats.append(x)
        top = feats.pop()
        cfg = self.config
        mu = ad.tanh(ad.conv3d(top, p["mu_head.w"], p["mu_head.b"])) * cfg.lambda_scale
        log_sigma = ad.clip(ad.conv3d(top, p["logsig_head.w"], p["logsig_head.b"]),
                            cfg.sigma_min, cfg.sigma_max)
        policy = LatentPolicy(mu, log_sigma, cfg.lambda_scale, cfg.sigma_min, cfg.sigma_max, tau)
        return feats, policy

    def decode(self, feats: list[Var], z) -> Var:
        """Displacement field (3, D, H, W) from skip features and a latent sample."""
        p = self.params
        x = ad.lift(z)
        if len(feats) != self.config.levels - 1:
            raise ShapeError("decode", (len(feats),), (self.config.levels - 1,), "feature count")
        for lvl in range(self.config.levels - 2, -1, -1):
            skip = feats[lvl]
            x = ad.upsample(x, 2)
            if x.shape[1:] != skip.shape[1:]:
                raise ShapeError("decode", x.shape, skip.shape, "latent does not match skip feature")
            x = ad.concat([x, skip], axis=0)
            x = ad.leaky_relu(ad.conv3d(x, p[f"dec{lvl}.w"], p[f"dec{lvl}.b"], padding=1), LEAKY_SLOPE)
            x = self._extra_convs(x, f"dec{lvl}")
        return ad.conv3d(x, p["flow.w"], p["flow.b"], padding=1)

    def _extra_convs(self, x: Var, prefix: str) -> Var:
        p = self.params
        for k in range(1, self.config.convs_per_level):
            x = ad.leaky_relu(ad.conv3d(x, p[f"{prefix}_{k}.w"], p[f"{prefix}_{k}.b"], padding=1), LEAKY_SLOPE)
        return x

    def predict(self, moving, fixed) -> np.ndarray:
        """Deterministic (z = mu) field as a plain array."""
        feats, policy = self.encode(moving, fixed)
        return self.decode(feats, policy.mu).value

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise CheckpointError(f"parameter names differ: missing {sorted(missing)}, "
                                  f"unexpected {sorted(extra)}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise CheckpointError(f"parameter {k!r}: checkpoint shape {v.shape} "
                                      f"!= model shape {self.params[k].shape}")
            self.params[k].value = np.array(v, dtype=DTYPE)

    def num_parameters(self) -> int:
        return int(sum(v.value.size for v in self.params.values()))


# ----------------------------------------------------------------------------
# checkpoint file: "MSK1", u32 version, u32 count, then per parameter
# u16 name length, utf-8 name, u8 rank, u32 extents, little-endian f64 payload

CKPT_MAGIC = b"MSK1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, state: dict[str, np.ndarray]) -> None:
    buf = bytearray(CKPT_MAGIC)
    buf += struct.pack("<II", CKPT_VERSION, len(state))
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        buf += struct.pack("<H", len(raw)) + raw
        buf += struct.pack("<B", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += np.ascontiguousarray(arr).tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(buf))
    tmp.replace(path)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError("bad magic at offset 0")
    if len(data) < 12:
        raise CheckpointError(f"truncated header at offset {len(data)}")
    version, count = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 4")
    off = 12
    state = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, off)
            off += 2
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", data, off)
            off += 1
            shape = struct.unpack_from(f"<{rank}I", data, off)
            off += 4 * rank
            nbytes = 8 * int(np.prod(shape, dtype=np.int64))
            if off + nbytes > len(data):
                raise CheckpointError(f"truncated payload at offset {off}")
            state[name] = np.frombuffer(data, dtype="<f8", count=nbytes // 8,
                                        offset=off).reshape(shape).astype(DTYPE)
            off += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated record at offset {off}") from exc
    return state
