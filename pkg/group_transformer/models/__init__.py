"""Pydantic schemas for configuration and results."""

from .schemas import (
    ArchConfig,
    GenConfig,
    GradCheckResult,
    InferConfig,
    MatchResult,
    SgdConfig,
    TrainConfig,
    TrainRecord,
    Variant,
)

__all__ = [
    "ArchConfig",
    "GenConfig",
    "GradCheckResult",
    "InferConfig",
    "MatchResult",
    "SgdConfig",
    "TrainConfig",
    "TrainRecord",
    "Variant",
]
