"""Run configuration: one JSON document with a section per pipeline stage.

Every section is checked against its dataclass before any work starts and
unknown keys anywhere are rejected.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Optional, Union

from .data import CorruptionModel, SceneConfig, default_corruption
from .decn import CorrectionConfig
from .dedn import DednConfig
from .labeling import LabelerConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSection:
    width: int = 64
    height: int = 64
    n_train: int = 512
    n_test: int = 64
    n_regions: int = 8
    depth_min: float = 0.5
    depth_max: float = 10.0
    multi_view: bool = True
    baseline_frac: float = 0.05
    texture_noise: float = 0.02
    gt_hole_fraction: float = 0.0
    corruption: tuple = field(default_factory=lambda: tuple(m.to_dict() for m in default_corruption()))

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")
        object.__setattr__(self, "corruption", tuple(dict(m) for m in self.corruption))
        self.scene_config()

    def scene_config(self) -> SceneConfig:
        models = tuple(CorruptionModel.from_dict(m) for m in self.corruption)
        if not models:
            raise ValueError("at least one corruption model is required")
        return SceneConfig(
            width=self.width,
            height=self.height,
            n_regions=self.n_regions,
            depth_min=self.depth_min,
            depth_max=self.depth_max,
            multi_view=self.multi_view,
            baseline_frac=self.baseline_frac,
            texture_noise=self.texture_noise,
            gt_hole_fraction=self.gt_hole_fraction,
            corruption=models,
        )


@dataclass(frozen=True)
class ModelSection:
    stem_channels: int = 8
    stage_channels: tuple = (16, 32, 64, 128)
    blocks_per_stage: int = 2
    n_views: int = 1
    head: str = "softmax"
    leaky_slope: float = 0.01
    depth_scale: float = 10.0


@dataclass(frozen=True)
class TrainingSection:
    learning_rate: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 8
    epochs: int = 30
    shuffle: bool = True
    checkpoint_every: int = 0
    init_from_pretrain: bool = False

    def __post_init__(self):
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")
        self.train_config(0)

    def train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(self.learning_rate, self.momentum, self.batch_size, self.epochs, seed, self.shuffle)


@dataclass(frozen=True)
class PretrainSection:
    warmup_epochs: int = 1
    distill_epochs: int = 3
    learning_rate: float = 1e-2
    momentum: float = 0.9
    batch_size: int = 8

    def __post_init__(self):
        if self.warmup_epochs < 0 or self.distill_epochs < 0:
            raise ValueError("pretrain epoch counts must be >= 0")
        if not self.learning_rate > 0 or self.batch_size < 1:
            raise ValueError("pretrain learning_rate must be > 0 and batch_size >= 1")


@dataclass(frozen=True)
class EvaluationSection:
    baseline_maps: int = 10
    baseline_size: int = 224

    def __post_init__(self):
        if self.baseline_maps < 1 or self.baseline_size < 1:
            raise ValueError("baseline_maps and baseline_size must be >= 1")


_SECTIONS = {
    "dataset": DatasetSection,
    "labeler": LabelerConfig,
    "model": ModelSection,
    "training": TrainingSection,
    "pretrain": PretrainSection,
    "correction": CorrectionConfig,
    "evaluation": EvaluationSection,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output: str = "runs/default"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    labeler: LabelerConfig = field(default_factory=LabelerConfig)
    model: ModelSection = field(default_factory=ModelSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    correction: CorrectionConfig = field(default_factory=CorrectionConfig)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def model_config(self) -> DednConfig:
        m = self.model
        try:
            return DednConfig(
                height=self.dataset.height,
                width=self.dataset.width,
                stem_channels=m.stem_channels,
                stage_channels=tuple(m.stage_channels),
                blocks_per_stage=m.blocks_per_stage,
                n_views=m.n_views,
                head=m.head,
                leaky_slope=m.leaky_slope,
                depth_scale=m.depth_scale,
                seed=self.seed,
            )
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dataset"]["corruption"] = [dict(m) for m in self.dataset.corruption]
        d["model"]["stage_channels"] = list(self.model.stage_channels)
        return d

    def validate(self) -> "RunConfig":
        self.model_config()
        if self.model.n_views == 2 and not self.dataset.multi_view:
            raise ConfigError("model.n_views = 2 requires dataset.multi_view = true")
        return self


def _section(name: str, cls, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {', '.join(unknown)}")
    if name == "dataset" and "corruption" in raw:
        for i, m in enumerate(raw["corruption"]):
            extra = sorted(set(m) - {f.name for f in fields(CorruptionModel)})
            if extra:
                raise ConfigError(f"unknown key(s) in dataset.corruption[{i}]: {', '.join(extra)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from exc


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS) - {"seed", "output"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kw: dict = {}
    if "seed" in raw:
        if not isinstance(raw["seed"], int) or raw["seed"] < 0:
            raise ConfigError("seed must be a nonnegative integer")
        kw["seed"] = raw["seed"]
    if "output" in raw:
        kw["output"] = str(raw["output"])
    for name, cls in _SECTIONS.items():
        if name in raw:
            kw[name] = _section(name, cls, raw[name])
    return RunConfig(**kw).validate()


def load_config(path: Optional[Union[str, Path]]) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return config_from_dict(raw)
