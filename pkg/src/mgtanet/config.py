"""Strict JSON run configuration."""

from __future__ import annotations

import json
from pathlib import Path

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigError, DataError
from .model import ModelConfig
from .sequence import AugmentParams, SceneSampler


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DataConfig(_Strict):
    num_train: int = 60
    num_test: int = 20
    scene_range: tuple[float, float, float, float] = (-25.6, -25.6, 25.6, 25.6)
    min_objects: int = 3
    max_objects: int = 8
    moving_prob: float = 0.6
    occluded_prob: float = 0.25
    ego_speed: tuple[float, float] = (0.0, 4.0)
    density: tuple[float, float] = (15.0, 40.0)
    ground_points: int = 120

    @model_validator(mode="after")
    def _check(self) -> "DataConfig":
        if self.num_train < 0 or self.num_test < 0:
            raise ValueError("split sizes must be non-negative")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("need 0 <= min_objects <= max_objects")
        return self

    def sampler(self, num_frames: int, num_scans: int) -> SceneSampler:
        return SceneSampler(scene_range=self.scene_range, min_objects=self.min_objects,
                            max_objects=self.max_objects, moving_prob=self.moving_prob,
                            occluded_prob=self.occluded_prob, ego_speed=self.ego_speed,
                            density=self.density, num_frames=num_frames, num_scans=num_scans,
                            ground_points=self.ground_points)


class AugmentConfig(_Strict):
    enabled: bool = True
    flip_prob: float = 0.5
    rotation: tuple[float, float] = (-0.7853981633974483, 0.7853981633974483)
    scale: tuple[float, float] = (0.95, 1.05)
    gt_sampling: bool = True
    gt_samples: int = 1

    def params(self) -> AugmentParams:
        return AugmentParams(self.flip_prob, self.rotation, self.scale)


class TrainConfig(_Strict):
    stage1_epochs: int = 20
    stage2_epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    stage2_lr_ratio: float = 0.2
    weight_decay: float = 0.0
    grad_clip: float = 10.0
    eval_every: int = 0
    augment: AugmentConfig = Field(default_factory=AugmentConfig)

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.batch_size < 1 or self.stage1_epochs < 0 or self.stage2_epochs < 0:
            raise ValueError("batch size must be positive and epoch counts non-negative")
        if self.lr <= 0 or self.stage2_lr_ratio <= 0:
            raise ValueError("learning rates must be positive")
        return self


class EvalConfig(_Strict):
    top_k: int = 50
    score_threshold: float = 0.1
    distance_thresholds: tuple[float, ...] = (0.5, 1.0)


class RunConfig(_Strict):
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    seed: int = 0
    dataset: str | None = None
    out: str | None = None

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)


def parse_config(data: dict | str) -> RunConfig:
    try:
        if isinstance(data, str):
            return RunConfig.model_validate_json(data)
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration:\n{exc}") from exc


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(cfg.to_json() + "\n", encoding="utf-8")
