"""Experiment configuration: a JSON document with defaults for every field."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

from impact.model.vit import ModelConfig

DEFAULT_SPARSITIES = (0.0, 0.1, 0.3, 0.5, 0.7)


@dataclass
class DataConfig:
    source: str = "shapes"  # "shapes" or "idx"
    idx_dir: str = ""
    train_per_class: int = 1000
    val_per_class: int = 50
    seed: int = 0


@dataclass
class TrainConfig:
    epochs: int = 6
    batch_size: int = 32
    lr: float = 5e-3
    weight_decay: float = 0.05
    warmup_steps: int = 50


@dataclass
class PruneConfig:
    method: str = "wanda"
    sparsities: list[float] = field(default_factory=lambda: list(DEFAULT_SPARSITIES))
    calibration: int = 128
    finetune_epochs: int = 2
    finetune_lr: float = 1e-3


@dataclass
class NeuronConfig:
    enabled: bool = True
    k: int = 50
    blocks: list[int] | None = None  # None: first, middle and last block
    tags: list[str] = field(default_factory=lambda: ["mlp_act"])
    categories: list[int] | None = None
    mean_images: int = 1000


@dataclass
class SaeConfig:
    enabled: bool = True
    k: int = 8
    expansion: int = 8
    epochs: int = 60
    batch_size: int = 128
    lr: float = 2e-3


@dataclass
class CircuitConfig:
    enabled: bool = True
    categories: list[int] | None = None
    lr: float = 1e-2
    k_dense: float = 8e-5
    k_sparse: float = 4e-5
    epochs: int = 15
    batch_size: int = 32
    step_size: int = 5
    gamma: float = 0.2
    tau: float = 1.0
    max_positives: int | None = 200


@dataclass
class AttributionConfig:
    enabled: bool = True
    images: int = 100
    steps: int = 50
    random_orders: int = 3
    relprop_eps: float = 1e-6


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    neurons: NeuronConfig = field(default_factory=NeuronConfig)
    sae: SaeConfig = field(default_factory=SaeConfig)
    circuits: CircuitConfig = field(default_factory=CircuitConfig)
    attribution: AttributionConfig = field(default_factory=AttributionConfig)
    seed: int = 0
    out: str = "runs/default"

    def validate(self) -> None:
        for s in self.prune.sparsities:
            if not 0.0 <= s < 1.0:
                raise ValueError(f"sparsity {s} outside [0, 1)")
        if self.prune.method not in ("magnitude", "wanda"):
            raise ValueError(f"unknown prune method {self.prune.method!r}")
        if self.data.source not in ("shapes", "idx"):
            raise ValueError(f"unknown data source {self.data.source!r}")
        if self.data.source == "idx" and not Path(self.data.idx_dir).is_dir():
            raise FileNotFoundError(f"IDX directory {self.data.idx_dir!r} does not exist")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _build(cls, data: dict[str, Any]):
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    defaults = cls()
    for name, value in data.items():
        current = getattr(defaults, name)
        kwargs[name] = _build(type(current), value) if is_dataclass(current) and isinstance(value, dict) else value
    return cls(**kwargs)


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, data)
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return config_from_dict({})
    return config_from_dict(json.loads(Path(path).read_text()))
