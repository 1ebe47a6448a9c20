"""Configuration management for group-transformer.

Two layers: process ``Settings`` resolved from the environment (and an
optional ``.env`` file), and experiment configs read from ``key=value``
files into the pydantic schemas.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from .errors import ConfigError

logger = logging.getLogger("group-transformer.config")

M = TypeVar("M", bound=BaseModel)


@dataclass
class Settings:
    """Runtime configuration derived from environment variables."""

    threads: int
    log_level: str


@lru_cache(maxsize=1)
def get_settings() -> Settings:
    """Resolve runtime settings from the environment once per process."""

    load_dotenv()
    cores = os.cpu_count() or 1
    threads_env = os.getenv("GT_THREADS", "").strip()
    if threads_env:
        try:
            threads = max(1, int(threads_env))
        except ValueError as exc:
            raise ConfigError(
                f"GT_THREADS must be an integer, got {threads_env!r}",
                details={"variable": "GT_THREADS"},
            ) from exc
    else:
        threads = cores

    return Settings(
        threads=threads,
        log_level=os.getenv("GT_LOG_LEVEL", "INFO").upper(),
    )


def _parse_value(raw: str) -> Union[str, None, List[Any]]:
    value = raw.strip()
    if not value:
        return []
    if value.lower() in {"none", "null"}:
        return None
    if ":" in value:
        return [[part.strip() for part in item.split(":")] for item in value.split(",") if item.strip()]
    if "," in value:
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


def parse_config_text(text: str, source: str = "<config>") -> Tuple[Dict[str, Any], Dict[str, int]]:
    """Parse ``key=value`` lines into a nested dict plus a key -> line index."""

    values: Dict[str, Any] = {}
    lines: Dict[str, int] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(
                f"{source}:{number}: expected key=value, got {stripped!r}",
                details={"path": source, "line": number},
            )
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{number}: empty key", details={"path": source, "line": number})
        if key in lines:
            raise ConfigError(
                f"{source}:{number}: duplicate key {key!r} (first set on line {lines[key]})",
                details={"path": source, "line": number, "key": key},
            )
        lines[key] = number
        target = values
        *parents, leaf = key.split(".")
        for parent in parents:
            node = target.setdefault(parent, {})
            if not isinstance(node, dict):
                raise ConfigError(
                    f"{source}:{number}: {key!r} conflicts with scalar {parent!r}",
                    details={"path": source, "line": number, "key": key},
                )
            target = node
        target[leaf] = _parse_value(raw)
    return values, lines


def build_config(schema: Type[M], values: Dict[str, Any], lines: Dict[str, int], source: str) -> M:
    try:
        return schema.model_validate(values)
    except ValidationError as exc:
        first = exc.errors()[0]
        key = ".".join(str(part) for part in first["loc"] if not isinstance(part, int))
        line = lines.get(key)
        where = f"{source}:{line}" if line else source
        reason = "unknown key" if first["type"] == "extra_forbidden" else first["msg"]
        raise ConfigError(
            f"{where}: {key or schema.__name__}: {reason}",
            details={"path": source, "line": line, "key": key, "errors": len(exc.errors())},
        ) from exc


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(path: Union[str, Path], schema: Type[M], base: Optional[M] = None) -> M:
    """Read a ``key=value`` config file into ``schema``; unknown keys are rejected.

    Keys missing from the file keep the values of ``base`` (a preset) when given.
    """

    config_path = Path(path)
    text = config_path.read_text(encoding="utf-8")
    values, lines = parse_config_text(text, str(config_path))
    if base is not None:
        values = _merge(base.model_dump(), values)
    config = build_config(schema, values, lines, str(config_path))
    logger.debug("Loaded %s from %s", schema.__name__, config_path)
    return config


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)) and not value:
        return ""
    if isinstance(value, (list, tuple)):
        if value and isinstance(value[0], (list, tuple)):
            return ",".join(":".join(str(part) for part in item) for item in value)
        return ",".join(str(item) for item in value)
    return str(value)


def dump_config(config: BaseModel) -> str:
    """Render a config as ``key=value`` lines (nested models use dotted keys)."""

    rows: List[str] = []

    def walk(prefix: str, payload: Dict[str, Any]) -> None:
        for key, value in payload.items():
            name = f"{prefix}{key}"
            if isinstance(value, dict):
                walk(f"{name}.", value)
            else:
                rows.append(f"{name}={_format_value(value)}")

    walk("", config.model_dump())
    return "\n".join(rows) + "\n"
