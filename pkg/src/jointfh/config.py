"""Run configuration: one JSON document with strict sections.

Example::

    {
      "data_seed": 7,
      "data": {"num_classes": 10, "samples_per_class": 50},
      "net": {"channels": [8, 16, 32, 64]},
      "train": {"total_steps": 400, "seed": 0},
      "mode_overrides": {"srnet-only": {"lr_srnet": 2e-4, "total_steps": 1000}},
      "eval": {"fpr_target": 0.01},
      "paths": {"data_dir": "data"}
    }

Every section is optional; unknown keys anywhere are rejected. A given
``mode_overrides`` replaces the default one as a whole. Relative paths
are resolved against the command's ``--out`` directory.
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from ._schema import ConfigError, config_hash, from_mapping
from .data import SyntheticIdentitySpec
from .evaluation import SETTINGS
from .networks import NetConfig
from .optimizer import MODES, TrainConfig


@dataclass(frozen=True)
class EvalConfig:
    folds: int = 10
    pca_dim: int = 128
    fpr_target: float = 0.01
    settings: tuple[int, ...] = (1, 2, 3, 4, 5, 6)

    def __post_init__(self):
        if self.folds < 2 or self.pca_dim < 1:
            raise ValueError("folds must be >= 2 and pca_dim >= 1")
        if not 0 < self.fpr_target < 1:
            raise ValueError("fpr_target must lie in (0, 1)")
        bad = [s for s in self.settings if s not in SETTINGS]
        if bad or not self.settings:
            raise ValueError(f"settings must be a non-empty subset of 1..6, got {list(self.settings)}")


@dataclass(frozen=True)
class PathsConfig:
    data_dir: str = "data"
    checkpoint_dir: str = "checkpoints"
    metrics_dir: str = "metrics"
    report_dir: str = "reports"
    image_dir: str = "images"


# The pure SR regime only sees the alpha-weighted pixel loss, so it needs a
# larger SRNET rate and a longer budget than the joint run.
SRNET_ONLY_OVERRIDES = {"srnet-only": {"lr_srnet": 2e-4, "total_steps": 1000, "decay_steps": [800, 900]}}


@dataclass(frozen=True)
class RunConfig:
    data_seed: int = 7
    data: SyntheticIdentitySpec = field(default_factory=SyntheticIdentitySpec)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mode_overrides: dict = field(default_factory=lambda: copy.deepcopy(SRNET_ONLY_OVERRIDES))
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def __post_init__(self):
        if self.data_seed < 0:
            raise ValueError("data_seed must be >= 0")
        if self.net.num_classes < self.data.num_classes:
            raise ValueError(f"net.num_classes ({self.net.num_classes}) is below data.num_classes "
                             f"({self.data.num_classes})")
        if (self.net.height, self.net.width) != (self.data.height, self.data.width):
            raise ValueError("net and data image sizes differ")
        for mode, overrides in self.mode_overrides.items():
            if mode not in MODES:
                raise ValueError(f"mode_overrides: unknown mode {mode!r}")
            if not isinstance(overrides, dict):
                raise ValueError(f"mode_overrides.{mode} must be an object")
            if "mode" in overrides:
                raise ValueError("mode_overrides entries cannot set 'mode'")
            # validates keys and values
            TrainConfig.from_dict({**asdict(self.train), **overrides})

    def train_config(self, mode: str) -> TrainConfig:
        merged = {**asdict(self.train), **self.mode_overrides.get(mode, {}), "mode": mode}
        return TrainConfig.from_dict(merged)

    @property
    def hash(self) -> str:
        return config_hash(self)


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return from_mapping(RunConfig, data, "config")


def with_seed(cfg: RunConfig, seed: int | None, which: str) -> RunConfig:
    """Apply a ``--seed`` override to the data seed or to the training seed."""
    if seed is None:
        return cfg
    if seed < 0:
        raise ConfigError("--seed must be >= 0")
    if which == "data":
        return replace(cfg, data_seed=seed)
    return replace(cfg, train=replace(cfg.train, seed=seed))
