"""Run configuration: YAML file with full defaulting, echoed into run manifests."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any, Optional

import yaml

VARIANTS = ("comb", "bce_encoder", "frozen_encoder", "dual_head")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_dim: int = 768
    text_dim: int = 512
    proj_dim: int = 512
    hidden: int = 512
    dropout: float = 0.1
    tau: float = 0.07
    epochs: int = 100
    batch_size: int = 32
    max_lr: float = 1e-5
    warmup_steps: int = 50
    weight_decay: float = 0.01
    include_positive: bool = False
    variant: str = "comb"
    contrastive_warmup_epochs: int = 0


@dataclass
class FeaturizerConfig:
    kind: str = "planted"  # planted | precomputed
    noise: float = 0.05
    seed: int = 0
    embeddings: Optional[str] = None


@dataclass
class GeneratorSettings:
    n_reverse: int = 1
    n_relocate: int = 2
    n_substitute: int = 1
    relocate_max_iou: float = 0.5


@dataclass
class RewriterConfig:
    url: Optional[str] = None
    model: Optional[str] = None
    prompt: str = "Rewrite this fragment as one grammatical sentence."
    timeout: float = 30.0
    required: bool = False
    options: dict = field(default_factory=dict)


@dataclass
class ScoringConfig:
    # predicted boxes below this area count as the absent location
    zero_area: float = 0.005
    literal_denominator: bool = False


@dataclass
class Paths:
    lexicon: Optional[str] = None
    annotations: Optional[str] = None
    reports: Optional[str] = None
    samples: Optional[str] = None
    corpus: Optional[str] = None
    checkpoint: Optional[str] = None
    out_dir: str = "out"


@dataclass
class Config:
    seed: int = 0
    paths: Paths = field(default_factory=Paths)
    model: ModelConfig = field(default_factory=ModelConfig)
    featurizer: FeaturizerConfig = field(default_factory=FeaturizerConfig)
    generator: GeneratorSettings = field(default_factory=GeneratorSettings)
    rewriter: RewriterConfig = field(default_factory=RewriterConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    split: list = field(default_factory=lambda: [0.7, 0.1, 0.2])

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def validate(self) -> "Config":
        m = self.model
        for name in ("image_dim", "text_dim", "proj_dim", "hidden", "epochs", "batch_size"):
            if getattr(m, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        for name in ("tau", "max_lr"):
            if getattr(m, name) <= 0:
                raise ConfigError(f"model.{name} must be positive")
        if m.warmup_steps < 0 or m.weight_decay < 0:
            raise ConfigError("model.warmup_steps and model.weight_decay must be non-negative")
        if not 0 <= m.dropout < 1:
            raise ConfigError("model.dropout must lie in [0, 1)")
        if m.variant not in VARIANTS:
            raise ConfigError(f"model.variant must be one of {VARIANTS}")
        if self.featurizer.kind not in ("planted", "precomputed"):
            raise ConfigError("featurizer.kind must be 'planted' or 'precomputed'")
        if self.featurizer.noise < 0:
            raise ConfigError("featurizer.noise must be non-negative")
        g = self.generator
        if min(g.n_reverse, g.n_relocate, g.n_substitute) < 0:
            raise ConfigError("generator counts must be non-negative")
        if len(self.split) != 3 or abs(sum(self.split) - 1) > 1e-9 or min(self.split) < 0:
            raise ConfigError("split must be three non-negative ratios summing to 1")
        return self


def _merge(obj: Any, data: dict, where: str) -> Any:
    known = {f.name: f for f in fields(obj)}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"unknown config key '{where}{key}'")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"'{where}{key}' must be a mapping")
            _merge(current, value, f"{where}{key}.")
        else:
            setattr(obj, key, value)
    return obj


def config_from_dict(data: Optional[dict]) -> Config:
    return _merge(Config(), data or {}, "").validate()


def load_config(path: Optional[str | Path]) -> Config:
    if path is None:
        return Config().validate()
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data)


def override(config: Config, dotted: dict) -> Config:
    """Apply ``{"model.epochs": 5}``-style overrides (CLI flags win over the file)."""
    for key, value in dotted.items():
        if value is None:
            continue
        *parents, leaf = key.split(".")
        obj = config
        for p in parents:
            obj = getattr(obj, p)
        if not hasattr(obj, leaf):
            raise ConfigError(f"unknown config key '{key}'")
        setattr(obj, leaf, value)
    return config.validate()
