"""Run configuration: strict YAML/JSON parsing into typed sections.

Every randomness source in a run derives from the single top-level ``seed``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .activations import Kind
from .attacks import PoisonSpec
from .defense import DefenseConfig
from .errors import ConfigError, SpecError


@dataclass
class DatasetConfig:
    source: str = "synthetic"
    # synthetic generator
    n_train: int = 20000
    n_test: int = 2000
    classes: int = 4
    height: int = 16
    width: int = 16
    noise: float = 0.08
    clutter: int = 2
    # IDX files
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    max_train: int | None = None

    def __post_init__(self):
        if self.source not in ("synthetic", "idx"):
            raise ConfigError(f"dataset.source must be 'synthetic' or 'idx', got {self.source!r}")
        if self.source == "idx":
            missing = [k for k in ("train_images", "train_labels", "test_images", "test_labels")
                       if getattr(self, k) is None]
            if missing:
                raise ConfigError(f"dataset.source=idx needs {', '.join('dataset.' + k for k in missing)}")


@dataclass
class VictimConfig:
    arch: str = "cnn"
    hidden: int = 64
    channels: int = 8
    act: str = "prelu"
    epochs: int = 10
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_size: int = 128

    def __post_init__(self):
        if self.arch not in ("cnn", "mlp"):
            raise ConfigError(f"victim.arch must be 'cnn' or 'mlp', got {self.arch!r}")
        try:
            Kind(self.act)
        except ValueError:
            raise ConfigError(f"victim.act must be one of {[k.value for k in Kind]}") from None
        if self.learning_rate <= 0 or self.epochs < 0:
            raise ConfigError("victim.learning_rate must be > 0 and victim.epochs >= 0")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    safety_run: bool = True
    figures: bool = True
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    attack: PoisonSpec = field(default_factory=PoisonSpec)
    victim: VictimConfig = field(default_factory=VictimConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["attack"] = self.attack.to_dict()
        d["defense"] = self.defense.to_dict()
        for section in ("attack", "defense"):
            d[section].pop("seed")
        return d

    def with_seed(self, seed):
        """Same config with every seed derived from ``seed``."""
        cfg = dataclasses.replace(self, seed=int(seed))
        cfg.attack = dataclasses.replace(self.attack, seed=int(seed))
        cfg.defense = dataclasses.replace(self.defense, seed=int(seed))
        return cfg


_SECTIONS = {
    "dataset": DatasetConfig,
    "attack": PoisonSpec,
    "victim": VictimConfig,
    "defense": DefenseConfig,
}
# seeds inside sections always come from the top-level seed
_DERIVED = {"seed"}


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a mapping, got {type(data).__name__}")
    allowed = {f.name for f in dataclasses.fields(cls)} - _DERIVED
    for key in data:
        if key not in allowed:
            raise ConfigError(f"unknown config key '{where}.{key}'")
    try:
        return cls(**data)
    except SpecError as exc:
        raise ConfigError(f"{where}: {exc}") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(data):
    """Build a :class:`RunConfig` from a plain mapping, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    top = {f.name for f in dataclasses.fields(RunConfig)}
    for key in data:
        if key not in top:
            raise ConfigError(f"unknown config key '{key}'")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    kwargs = {k: v for k, v in data.items() if k not in _SECTIONS}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build(cls, data.get(name, {}), name)
    return RunConfig(**kwargs).with_seed(seed)


def load_config(path):
    """Read a YAML or JSON config file (JSON is valid YAML)."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML/JSON ({exc})") from None
    return parse_config(data)
