"""Error types shared across group-transformer.

Every error carries a machine readable ``code``, a human readable message
and optional ``details``. ``payload()`` renders them as one envelope; the
CLI prints its code and message and logs the details at debug level.
"""

from __future__ import annotations

from typing import Any, Dict, Optional


class GroupTransformerError(Exception):
    """Base class for all library errors."""

    code = "group_transformer_error"

    def __init__(
        self,
        message: str,
        *,
        code: Optional[str] = None,
        details: Optional[Dict[str, Any]] = None,
    ) -> None:
        super().__init__(message)
        self.message = message
        if code is not None:
            self.code = code
        self.details = details or {}

    def payload(self) -> Dict[str, Any]:
        return {
            "error": {
                "code": self.code,
                "message": self.message,
                "details": self.details or None,
            }
        }


class ValidationFailure(GroupTransformerError):
    """Input or configuration rejected; the CLI exits with status 1."""

    code = "validation_failed"


class DimensionError(ValidationFailure):
    code = "dimension_mismatch"

    def __init__(self, op: str, left: tuple, right: tuple, reason: str = "") -> None:
        message = f"{op}: incompatible shapes {tuple(left)} and {tuple(right)}"
        if reason:
            message = f"{message} ({reason})"
        super().__init__(
            message,
            details={"op": op, "left": list(left), "right": list(right)},
        )


class GradientError(ValidationFailure):
    code = "gradient_error"


class SceneFormatError(ValidationFailure):
    code = "scene_parse_error"

    def __init__(self, message: str, *, path: Optional[str] = None, line: Optional[int] = None) -> None:
        where = f"{path}:{line}" if path and line else (path or "")
        super().__init__(
            f"{where}: {message}" if where else message,
            details={"path": path, "line": line},
        )
        self.line = line


class SceneValidationError(ValidationFailure):
    code = "scene_invalid"


class FeatureFormatError(ValidationFailure):
    code = "feature_file_invalid"


class CheckpointError(ValidationFailure):
    code = "checkpoint_invalid"


class ConfigError(ValidationFailure):
    code = "config_invalid"


class ClusteringError(ValidationFailure):
    code = "clustering_failed"


class GenerationError(ValidationFailure):
    code = "generation_infeasible"


class NotVisibleError(ValidationFailure):
    """A person (or person pair) has no visible frame where one is required."""

    code = "not_visible"
