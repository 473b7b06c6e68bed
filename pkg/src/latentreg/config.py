"""Experiment configuration: one JSON document, every field defaulted."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .grpo import GrpoConfig, RewardWeights, TauSchedule
from .network import BackboneConfig
from .objectives import WarmupWeights
from .synthdata import SPLITS, SceneSpec
from .training import WarmupConfig


class ConfigError(ValueError):
    pass


def default_scene() -> SceneSpec:
    # blurred, high-contrast scenes with deformations large enough to leave
    # headroom above the identity Dice
    return SceneSpec(smoothing=1.0, semi_axis_range=(3.0, 5.0), amplitude=3.0, bump_width=4.0,
                     intensities=[0.0, 1.0, 0.6, 0.3])


def default_warmup() -> WarmupConfig:
    return WarmupConfig(epochs=30, lr=2e-3, weights=WarmupWeights(lambda_reg=0.05, beta_kl=1e-3))


def default_grpo() -> GrpoConfig:
    return GrpoConfig(lr=1e-3, epochs=30)


@dataclass
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=default_scene)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    warmup: WarmupConfig = field(default_factory=default_warmup)
    grpo: GrpoConfig = field(default_factory=default_grpo)
    counts: dict = field(default_factory=lambda: {"unlabeled": 40, "labeled": 10, "val": 4, "test": 8})
    seed: int = 0
    data_seed: int = 0
    out_dir: str = "runs/default"
    memory_budget_mb: float = 2048.0
    # grpo starts from a fresh network instead of the warm-up checkpoint
    no_warmup: bool = False

    def __post_init__(self):
        self.scene.seed = self.data_seed
        unknown = set(self.counts) - set(SPLITS)
        if unknown:
            raise ConfigError(f"unknown split(s) {sorted(unknown)}")
        for k, v in self.counts.items():
            if not isinstance(v, int) or v < 0:
                raise ConfigError(f"count for {k!r} must be a non-negative integer")
        if self.memory_budget_mb <= 0:
            raise ConfigError("memory_budget_mb must be positive")

    @property
    def num_classes(self) -> int:
        return self.scene.num_classes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scene"] = self.scene.to_dict()
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise ConfigError(f"unknown config key(s): {sorted(extra)}")
        try:
            kw = dict(raw)
            if "scene" in kw:
                kw["scene"] = SceneSpec(**{**default_scene().to_dict(), **kw["scene"]})
            if "backbone" in kw:
                kw["backbone"] = BackboneConfig(**kw["backbone"])
            if "warmup" in kw:
                w = {**asdict(default_warmup()), **kw["warmup"]}
                w["weights"] = WarmupWeights(**w["weights"])
                kw["warmup"] = WarmupConfig(**w)
            if "grpo" in kw:
                g = {**asdict(default_grpo()), **kw["grpo"]}
                g["tau"] = TauSchedule(**g["tau"])
                g["reward"] = RewardWeights(**g["reward"])
                kw["grpo"] = GrpoConfig(**g)
            if "counts" in kw:
                kw["counts"] = {**cls().counts, **kw["counts"]}
            cfg = cls(**kw)
            cfg.scene.validate()
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return ExperimentConfig.from_dict(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True)
