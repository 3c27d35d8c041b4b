"""Run configuration: one JSON document with a section per module.

The canonical defaults live in ``configs/default.json``; a user file and
command-line flags are deep-merged on top of the selected preset.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .data import AugmentationConfig
from .errors import InvalidInput
from .model import ModelConfig


@dataclass
class DataConfig:
    amplitudes: tuple[float, ...] = (0.05, 0.3, 1.0)
    n_per_class: int = 100
    frames: int = 20
    motion_frequency: float = 1.5
    noise_sigma: float = 0.02
    test_fraction: float = 0.3


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    ema_coefficient: float = 0.99
    curvature: float = 1.0
    e1: int = 6
    e2: int = 12
    tau: float = 0.07
    queue_capacity: int = 256
    with_negatives: bool = False
    without_hyperbolic: bool = False
    without_curriculum: bool = False
    negative_similarity: str = "cosine"
    # keep the epoch with the best validation probe instead of the last one
    select_best: bool = True
    eval_every: int = 5
    val_fraction: float = 0.2


@dataclass
class ProbeConfig:
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1.0
    finetune_lr: float = 0.1
    momentum: float = 0.9
    standardize: bool = True


@dataclass
class AnalyticsConfig:
    n_bins: int = 10
    n_views: int = 5
    branch: str = "target"


@dataclass
class LabConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    analytics: AnalyticsConfig = field(default_factory=AnalyticsConfig)

    def validate(self) -> "LabConfig":
        t = self.train
        if t.epochs < 0 or t.batch_size < 1 or t.lr <= 0 or not 0 <= t.ema_coefficient <= 1:
            raise InvalidInput("train: epochs >= 0, batch_size >= 1, lr > 0, ema in [0, 1] required")
        if t.curvature <= 0 or t.tau <= 0 or t.weight_decay < 0 or t.queue_capacity < 0:
            raise InvalidInput("train: curvature, tau must be positive; weight decay, queue non-negative")
        if not 0 <= t.e1 < t.e2:
            raise InvalidInput(f"train: need 0 <= e1 < e2, got ({t.e1}, {t.e2})")
        if t.eval_every < 1 or not 0 < t.val_fraction < 1:
            raise InvalidInput("train: eval_every >= 1 and val_fraction in (0, 1) required")
        if t.negative_similarity not in ("cosine", "poincare"):
            raise InvalidInput(f"train: unknown negative_similarity {t.negative_similarity!r}")
        if not 0 < self.data.test_fraction < 1:
            raise InvalidInput("data: test_fraction must lie in (0, 1)")
        if self.analytics.branch not in ("target", "online"):
            raise InvalidInput("analytics: branch must be 'target' or 'online'")
        return self


SECTIONS = {
    "data": DataConfig,
    "augmentation": AugmentationConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "probe": ProbeConfig,
    "analytics": AnalyticsConfig,
}


def _build(cls, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise InvalidInput(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return cls(**kwargs)


def from_dict(doc: dict) -> LabConfig:
    unknown = set(doc) - set(SECTIONS) - {"seed", "presets"}
    if unknown:
        raise InvalidInput(f"unknown config sections: {sorted(unknown)}")
    sections = {name: _build(cls, doc.get(name, {})) for name, cls in SECTIONS.items()}
    return LabConfig(seed=int(doc.get("seed", 0)), **sections).validate()


def to_dict(cfg: LabConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        return v

    out = {"seed": cfg.seed}
    for name in SECTIONS:
        out[name] = {k: plain(v) for k, v in dataclasses.asdict(getattr(cfg, name)).items()}
    return out


def merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for k, v in override.items():
        out[k] = merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def canonical_document() -> dict:
    text = resources.files("hysp_lab").joinpath("configs/default.json").read_text()
    return json.loads(text)


def load_config(path=None, preset: str = "desk", overrides: dict | None = None) -> LabConfig:
    doc = canonical_document()
    presets = doc.pop("presets", {})
    if preset not in presets:
        raise InvalidInput(f"unknown preset {preset!r}; choose from {sorted(presets)}")
    doc = merge(doc, presets[preset])
    if path is not None:
        doc = merge(doc, json.loads(Path(path).read_text()))
    if overrides:
        doc = merge(doc, overrides)
    doc.pop("presets", None)
    return from_dict(doc)


def config_hash(cfg: LabConfig) -> str:
    blob = json.dumps(to_dict(cfg), sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
