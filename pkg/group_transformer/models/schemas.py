from __future__ import annotations

from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


class _Strict(BaseModel):
    """Configs reject unknown keys."""

    model_config = ConfigDict(extra="forbid", frozen=True)


class SgdConfig(_Strict):
    """Plain SGD (no momentum) with multiplicative step decay."""

    learning_rate: float = Field(default=0.1, gt=0)
    schedule: List[Tuple[int, float]] = Field(
        default_factory=list,
        description="(epoch, factor) pairs; the factor applies from that epoch on",
    )

    @field_validator("schedule")
    @classmethod
    def _positive_factors(cls, value: List[Tuple[int, float]]) -> List[Tuple[int, float]]:
        for epoch, factor in value:
            if epoch < 0 or factor <= 0:
                raise ValueError(f"schedule entry ({epoch}, {factor}) needs epoch >= 0 and factor > 0")
        return sorted(value)

    def lr_at(self, epoch: int) -> float:
        lr = self.learning_rate
        for milestone, factor in self.schedule:
            if epoch >= milestone:
                lr *= factor
        return lr


Variant = Literal["full", "no_occlusion", "no_transformer", "no_appearance"]


class ArchConfig(_Strict):
    """Layer widths of the model; defaults reproduce the published architecture."""

    app_dim: int = Field(default=16384, gt=0, description="raw appearance feature width")
    f_dim: int = Field(default=1024, gt=0, description="similarity embedding width")
    z_dim: int = Field(default=512, gt=0, description="masked appearance width")
    traj_channels: int = Field(default=5, gt=0)
    conv_channels: Tuple[int, int, int] = (64, 64, 128)
    depth: int = Field(default=2, gt=0, description="number of stacked spatio-temporal blocks")
    model_dim: int = Field(default=128, gt=0)
    heads: int = Field(default=4, gt=0)
    encoder_layers: int = Field(default=2, gt=0)
    ff_dim: int = Field(default=128, gt=0)
    residual: Literal["value", "canonical"] = "value"
    pooling: Literal["covisible", "all"] = "covisible"
    variant: Variant = "full"

    @field_validator("conv_channels")
    @classmethod
    def _positive_channels(cls, value: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if any(c <= 0 for c in value):
            raise ValueError("conv channels must be positive")
        return value

    @model_validator(mode="after")
    def _heads_divide_width(self) -> "ArchConfig":
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by {self.heads} heads")
        return self

    @property
    def uses_appearance(self) -> bool:
        return self.variant != "no_appearance"

    @property
    def temporal_width(self) -> int:
        return self.conv_channels[-1]

    @property
    def edge_dim(self) -> int:
        width = self.depth * self.temporal_width
        if self.uses_appearance:
            width += self.depth * self.model_dim
        return width

    @classmethod
    def tiny(cls, app_dim: int = 8, **overrides) -> "ArchConfig":
        """Scaled-down widths for finite-difference checks."""
        values = dict(
            app_dim=app_dim,
            f_dim=4,
            z_dim=4,
            conv_channels=(4, 4, 8),
            model_dim=8,
            heads=2,
            encoder_layers=2,
            ff_dim=8,
        )
        values.update(overrides)
        return cls(**values)


class InferConfig(_Strict):
    delta_test: float = Field(default=0.2, gt=0, description="max center distance kept for scoring")
    gamma: float = Field(default=0.3, ge=0, le=1, description="min temporal IoU kept for scoring")
    clustering: Literal["label_propagation", "spectral"] = "label_propagation"
    n_clusters: Optional[int] = Field(default=None, gt=0)
    max_iters: int = Field(default=100, gt=0)
    seed: int = 0

    @classmethod
    def large_scale(cls, **overrides) -> "InferConfig":
        return cls(**{"delta_test": 0.2, "gamma": 0.3, "clustering": "label_propagation", **overrides})

    @classmethod
    def small_scale(cls, **overrides) -> "InferConfig":
        return cls(**{"delta_test": 0.75, "gamma": 0.001, "clustering": "spectral", **overrides})


def _large_scale_schedule() -> SgdConfig:
    return SgdConfig(learning_rate=0.1, schedule=[(50, 0.2), (100, 0.2), (150, 0.2)])


class TrainConfig(_Strict):
    groups_per_iter: int = Field(default=8, gt=0)
    grad_accum_iters: int = Field(default=10, gt=0)
    epochs: int = Field(default=200, gt=0)
    iterations_per_scene: int = Field(default=1, gt=0)
    window: int = Field(default=16, gt=0)
    delta_train: float = Field(default=0.1, gt=0)
    sgd: SgdConfig = Field(default_factory=_large_scale_schedule)
    arch: ArchConfig = Field(default_factory=ArchConfig)
    infer: InferConfig = Field(default_factory=InferConfig.large_scale)
    seed: int = 0

    @model_validator(mode="after")
    def _train_threshold_below_test(self) -> "TrainConfig":
        if self.delta_train >= self.infer.delta_test:
            raise ValueError(
                f"delta_train ({self.delta_train}) must be smaller than delta_test ({self.infer.delta_test})"
            )
        return self

    @classmethod
    def large_scale(cls, **overrides) -> "TrainConfig":
        return cls(**overrides)

    @classmethod
    def small_scale(cls, **overrides) -> "TrainConfig":
        values = dict(
            epochs=20,
            delta_train=0.5,
            sgd=SgdConfig(learning_rate=0.1),
            infer=InferConfig.small_scale(),
        )
        values.update(overrides)
        return cls(**values)


class GenConfig(_Strict):
    """Synthetic scene generator settings (normalized frame coordinates)."""

    n_groups: int = Field(default=8, ge=0)
    parallel_groups: int = Field(default=2, ge=0, description="groups that walk beside an earlier group (at most n_groups - 1)")
    group_size_min: int = Field(default=2, ge=2)
    group_size_max: int = Field(default=4, ge=2)
    n_singletons: int = Field(default=6, ge=0)
    parallel_singletons: int = Field(default=2, ge=0, description="singletons that shadow a group's motion")
    frame_count: int = Field(default=16, gt=0)
    frame_aspect: float = Field(default=16 / 9, gt=0, description="frame width / height")
    box_width: float = Field(default=0.03, gt=0, lt=1)
    box_height: float = Field(default=0.1, gt=0, lt=1)
    walk_speed: float = Field(default=0.003, ge=0, description="std of the per-frame velocity change")
    max_speed: float = Field(default=0.01, gt=0)
    cohesion_radius: float = Field(default=0.04, gt=0)
    app_dim: int = Field(default=64, gt=0)
    appearance_noise: float = Field(default=0.05, ge=0)
    group_appearance_share: float = Field(default=0.5, ge=0, le=1)
    occlusion_iou: float = Field(default=0.3, ge=0, le=1)
    occlusion_weight: float = Field(default=0.7, ge=0, le=1)
    seed: int = 0

    @model_validator(mode="after")
    def _sizes_ordered(self) -> "GenConfig":
        if self.group_size_min > self.group_size_max:
            raise ValueError("group_size_min must not exceed group_size_max")
        if self.parallel_singletons > self.n_singletons:
            raise ValueError("parallel_singletons cannot exceed n_singletons")
        return self


class MatchResult(BaseModel):
    matched: List[Tuple[int, int]] = Field(default_factory=list, description="(detected index, truth index)")
    detected: int
    ground_truth: int
    precision: float
    recall: float
    f1: float


class GradCheckResult(BaseModel):
    name: str
    error: float
    tolerance: float
    passed: bool


class TrainRecord(BaseModel):
    epoch: int
    iteration: int
    scene: int
    loss: float
    balance: float = Field(description="fraction of positive edges in the batch")
    edges: int
    learning_rate: float
