"""Run configuration: a nested YAML file with ``model``, ``train`` and ``data`` sections."""

import copy
import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Tuple

import yaml

from .net import ConfigError, ModelConfig


@dataclass
class TrainConfig:
    lr: float = 2e-4
    betas: Tuple[float, float] = (0.9, 0.99)
    batch: int = 16
    epochs: int = 150
    max_steps: Optional[int] = None
    seed: int = 0
    schedule: str = "constant"       # or "cosine"
    checkpoint_every: int = 0         # steps; 0 disables periodic checkpoints
    eval_every: int = 0               # steps; 0 disables periodic validation
    log_every: int = 1
    target_psnr: Optional[float] = None   # stop early once train-set PSNR exceeds this
    augment: bool = True
    channels_last: bool = True
    device: str = "cpu"

    def __post_init__(self):
        self.betas = tuple(self.betas)

    def validate(self):
        if not self.lr > 0:
            raise ConfigError("train.lr must be positive")
        if self.batch < 1:
            raise ConfigError("train.batch must be >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")
        return self

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class DataConfig:
    manifest: str = "data/manifest.csv"
    root: Optional[str] = None
    scale: int = 8
    size: int = 128

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown data keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self):
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "data": dataclasses.asdict(self.data)}

    @classmethod
    def from_dict(cls, d):
        d = d or {}
        unknown = set(d) - {"model", "train", "data"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(ModelConfig.from_dict(d.get("model") or {}),
                  TrainConfig.from_dict(d.get("train") or {}),
                  DataConfig.from_dict(d.get("data") or {}))
        cfg.model.validate()
        cfg.train.validate()
        return cfg


def parse_value(text):
    return yaml.safe_load(text)


def apply_overrides(tree, overrides):
    """Apply ``section.key=value`` strings to a nested dict (values parsed as YAML)."""
    tree = copy.deepcopy(tree)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = tree
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot set {key}: {p} is not a section")
        node[parts[-1]] = parse_value(value)
    return tree


def load_config(path=None, overrides=()):
    tree = {}
    if path is not None:
        try:
            with open(path) as fh:
                tree = yaml.safe_load(fh) or {}
        except (OSError, yaml.YAMLError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
    try:
        return RunConfig.from_dict(apply_overrides(tree, overrides))
    except TypeError as e:
        raise ConfigError(str(e)) from e


def dump_config(cfg: RunConfig, path):
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
