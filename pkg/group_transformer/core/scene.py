"""Scenes: tracked persons, ground-truth groups, and their file formats.

A scene file is UTF-8 JSON::

    {"frame_count": T, "app_dim": D,
     "persons": [{"id": 3, "frames": [{"t": 0, "box": [x0, y0, x1, y1]}, ...]}],
     "groups": [[3, 7], ...]}

Appearance features live in a little-endian "GTFT" binary next to it:
magic, u32 version=1, u32 person_count, then per person u32 id, u32
frame_count, u32 D followed by frame_count records of (u32 t, D x f32).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .errors import FeatureFormatError, NotVisibleError, SceneFormatError, SceneValidationError, ValidationFailure

logger = logging.getLogger("group-transformer.scene")

FEATURE_MAGIC = b"GTFT"
FEATURE_VERSION = 1
MIN_EXTENT = 1e-6

Window = Tuple[int, int]


@dataclass(frozen=True)
class BoundingBox:
    """Corner box in frame-normalized coordinates."""

    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.x0 < self.x1 <= 1.0 and 0.0 <= self.y0 < self.y1 <= 1.0):
            raise SceneValidationError(
                f"box {self.as_list()} must satisfy 0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1",
                details={"box": self.as_list()},
            )

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def center(self) -> Tuple[float, float]:
        return ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)

    def as_list(self) -> List[float]:
        return [self.x0, self.y0, self.x1, self.y1]


@dataclass(frozen=True)
class TrackedPerson:
    """One track: boxes keyed by frame, appearance rows aligned with ``frames``."""

    id: int
    boxes: Mapping[int, BoundingBox]
    appearance: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    @property
    def frames(self) -> Tuple[int, ...]:
        return tuple(sorted(self.boxes))

    def visibility(self, window: Window) -> np.ndarray:
        t0, t1 = window
        return np.array([t in self.boxes for t in range(t0, t1)], dtype=bool)

    def centers(self, window: Window) -> np.ndarray:
        """[T, 2] box centers; rows of invisible frames are zero."""
        t0, t1 = window
        out = np.zeros((t1 - t0, 2))
        for t in range(t0, t1):
            box = self.boxes.get(t)
            if box is not None:
                out[t - t0] = box.center
        return out

    def appearance_at(self, t: int) -> np.ndarray:
        if self.appearance is None:
            raise FeatureFormatError(f"person {self.id} has no appearance features attached")
        return self.appearance[self.frames.index(t)]


@dataclass(frozen=True)
class Scene:
    frame_count: int
    app_dim: int
    persons: Tuple[TrackedPerson, ...]
    groups: Tuple[FrozenSet[int], ...]

    @property
    def person_ids(self) -> List[int]:
        return [p.id for p in self.persons]

    @property
    def has_features(self) -> bool:
        return all(p.appearance is not None for p in self.persons)

    def person(self, person_id: int) -> TrackedPerson:
        for p in self.persons:
            if p.id == person_id:
                return p
        raise KeyError(person_id)

    def group_index(self) -> Dict[int, int]:
        """person id -> index of its ground-truth group (grouped persons only)."""
        return {member: g for g, group in enumerate(self.groups) for member in group}


@dataclass(frozen=True)
class TrajectoryFeature:
    """[5, T] rows (cx, cy, w, h, visible) for one person over a window."""

    values: np.ndarray
    window: Window

    @property
    def visible(self) -> np.ndarray:
        return self.values[4] > 0

    @property
    def empty(self) -> bool:
        return not self.visible.any()


# -- validation ---------------------------------------------------------------


def validate_scene(scene: Scene) -> Scene:
    """Check scene invariants; raises SceneValidationError naming the culprit."""

    if scene.frame_count <= 0:
        raise SceneValidationError("frame_count must be positive")
    seen: set[int] = set()
    for person in scene.persons:
        if person.id in seen:
            raise SceneValidationError(f"person id {person.id} appears twice", details={"person": person.id})
        seen.add(person.id)
        if not person.boxes:
            raise SceneValidationError(f"person {person.id} has no visible frame", details={"person": person.id})
        for t in person.boxes:
            if not 0 <= t < scene.frame_count:
                raise SceneValidationError(
                    f"person {person.id}: frame {t} outside [0, {scene.frame_count})",
                    details={"person": person.id, "frame": t},
                )
        if person.appearance is not None and person.appearance.shape != (len(person.boxes), scene.app_dim):
            raise SceneValidationError(
                f"person {person.id}: appearance shape {person.appearance.shape} does not match "
                f"{len(person.boxes)} visible frames x {scene.app_dim}",
                details={"person": person.id},
            )
    owner: Dict[int, int] = {}
    for index, group in enumerate(scene.groups):
        if len(group) < 2:
            raise SceneValidationError(f"group {index} has fewer than two members", details={"group": index})
        for member in group:
            if member not in seen:
                raise SceneValidationError(
                    f"group {index} references unknown person {member}",
                    details={"group": index, "person": member},
                )
            if member in owner:
                raise SceneValidationError(
                    f"person {member} belongs to groups {owner[member]} and {index}",
                    details={"group": index, "person": member},
                )
            owner[member] = index
    return scene


# -- scene JSON ---------------------------------------------------------------


class _FrameDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    t: int
    box: List[float] = Field(min_length=4, max_length=4)


class _PersonDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    id: int
    frames: List[_FrameDocument]


class _SceneDocument(BaseModel):
    model_config = ConfigDict(extra="forbid")

    frame_count: int
    app_dim: int = Field(gt=0)
    persons: List[_PersonDocument]
    groups: List[List[int]] = Field(default_factory=list)


def scene_from_dict(payload: object, source: str = "<scene>") -> Scene:
    try:
        document = _SceneDocument.model_validate(payload)
    except ValidationError as exc:
        first = exc.errors()[0]
        where = ".".join(str(part) for part in first["loc"])
        raise SceneFormatError(f"{where}: {first['msg']}", path=source) from exc

    persons = []
    for person in document.persons:
        boxes: Dict[int, BoundingBox] = {}
        for frame in sorted(person.frames, key=lambda f: f.t):
            if frame.t in boxes:
                raise SceneValidationError(
                    f"person {person.id}: frame {frame.t} listed twice",
                    details={"person": person.id, "frame": frame.t},
                )
            try:
                boxes[frame.t] = BoundingBox(*frame.box)
            except SceneValidationError as exc:
                raise SceneValidationError(
                    f"person {person.id}, frame {frame.t}: {exc.message}",
                    details={"person": person.id, "frame": frame.t},
                ) from exc
        persons.append(TrackedPerson(id=person.id, boxes=boxes))
    groups = []
    for index, members in enumerate(document.groups):
        if len(set(members)) != len(members):
            raise SceneValidationError(f"group {index} lists a member twice", details={"group": index})
        groups.append(frozenset(members))
    scene = Scene(
        frame_count=document.frame_count,
        app_dim=document.app_dim,
        persons=tuple(persons),
        groups=tuple(groups),
    )
    return validate_scene(scene)


def scene_to_dict(scene: Scene) -> dict:
    return {
        "frame_count": scene.frame_count,
        "app_dim": scene.app_dim,
        "persons": [
            {"id": p.id, "frames": [{"t": t, "box": p.boxes[t].as_list()} for t in p.frames]}
            for p in scene.persons
        ],
        "groups": [sorted(group) for group in scene.groups],
    }


def load_scene(path: Union[str, Path], features: Union[str, Path, None] = None) -> Scene:
    """Read and validate a scene file, optionally attaching a feature file."""

    scene_path = Path(path)
    text = scene_path.read_text(encoding="utf-8")
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SceneFormatError(exc.msg, path=str(scene_path), line=exc.lineno) from exc
    scene = scene_from_dict(payload, str(scene_path))
    if features is not None:
        scene = attach_features(scene, read_features(features))
    logger.debug("Loaded scene %s: %d persons, %d groups", scene_path, len(scene.persons), len(scene.groups))
    return scene


def save_scene(scene: Scene, path: Union[str, Path]) -> Path:
    scene_path = Path(path)
    scene_path.parent.mkdir(parents=True, exist_ok=True)
    scene_path.write_text(json.dumps(scene_to_dict(scene), indent=1) + "\n", encoding="utf-8")
    return scene_path


# -- feature binary -----------------------------------------------------------

FeatureTable = Dict[int, Tuple[np.ndarray, np.ndarray]]


def write_features(scene: Scene, path: Union[str, Path]) -> Path:
    """Write every person's appearance rows as float32 records."""

    feature_path = Path(path)
    feature_path.parent.mkdir(parents=True, exist_ok=True)
    record = np.dtype([("t", "<u4"), ("v", "<f4", (scene.app_dim,))])
    chunks = [struct.pack("<4sII", FEATURE_MAGIC, FEATURE_VERSION, len(scene.persons))]
    for person in scene.persons:
        if person.appearance is None:
            raise FeatureFormatError(f"person {person.id} has no appearance features", details={"person": person.id})
        frames = person.frames
        chunks.append(struct.pack("<III", person.id, len(frames), scene.app_dim))
        rows = np.zeros(len(frames), dtype=record)
        rows["t"] = frames
        rows["v"] = person.appearance
        chunks.append(rows.tobytes())
    feature_path.write_bytes(b"".join(chunks))
    return feature_path


def read_features(path: Union[str, Path]) -> FeatureTable:
    """Parse a feature file into person id -> (frames [K], values [K, D])."""

    feature_path = Path(path)
    blob = feature_path.read_bytes()
    header = struct.calcsize("<4sII")
    if len(blob) < header:
        raise FeatureFormatError(f"{feature_path}: truncated header")
    magic, version, count = struct.unpack_from("<4sII", blob, 0)
    if magic != FEATURE_MAGIC:
        raise FeatureFormatError(f"{feature_path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{feature_path}: unsupported version {version}")
    offset = header
    table: FeatureTable = {}
    for _ in range(count):
        if offset + 12 > len(blob):
            raise FeatureFormatError(f"{feature_path}: truncated person header at byte {offset}")
        person_id, frames, dim = struct.unpack_from("<III", blob, offset)
        offset += 12
        record = np.dtype([("t", "<u4"), ("v", "<f4", (dim,))])
        size = frames * record.itemsize
        if offset + size > len(blob):
            raise FeatureFormatError(f"{feature_path}: truncated records for person {person_id}")
        rows = np.frombuffer(blob, dtype=record, count=frames, offset=offset)
        offset += size
        times = rows["t"].astype(np.int64)
        if np.any(np.diff(times) <= 0):
            raise FeatureFormatError(
                f"{feature_path}: person {person_id} frames are not strictly increasing",
                details={"person": person_id},
            )
        if person_id in table:
            raise FeatureFormatError(f"{feature_path}: person {person_id} listed twice", details={"person": person_id})
        table[person_id] = (times, rows["v"].astype(np.float64).reshape(frames, dim))
    if offset != len(blob):
        raise FeatureFormatError(f"{feature_path}: {len(blob) - offset} trailing bytes")
    return table


def attach_features(scene: Scene, table: FeatureTable) -> Scene:
    persons = []
    for person in scene.persons:
        if person.id not in table:
            raise FeatureFormatError(f"no features for person {person.id}", details={"person": person.id})
        times, values = table[person.id]
        if tuple(int(t) for t in times) != person.frames:
            raise FeatureFormatError(
                f"person {person.id}: feature frames differ from visible frames",
                details={"person": person.id},
            )
        if values.shape[1] != scene.app_dim:
            raise FeatureFormatError(
                f"person {person.id}: feature width {values.shape[1]} != app_dim {scene.app_dim}",
                details={"person": person.id},
            )
        persons.append(replace(person, appearance=values))
    return replace(scene, persons=tuple(persons))


# -- per-window views ---------------------------------------------------------


def build_trajectory_features(person: TrackedPerson, window: Window) -> TrajectoryFeature:
    t0, t1 = window
    if t0 < 0 or t1 <= t0:
        raise ValidationFailure(f"invalid window {window}", code="invalid_window")
    values = np.zeros((5, t1 - t0))
    for t in range(t0, t1):
        box = person.boxes.get(t)
        if box is None:
            continue
        cx, cy = box.center
        values[:, t - t0] = (cx, cy, box.width, box.height, 1.0)
    return TrajectoryFeature(values=values, window=window)


def appearance_window(person: TrackedPerson, window: Window, app_dim: int) -> np.ndarray:
    """[T, D] appearance rows; zero at invisible frames."""
    t0, t1 = window
    out = np.zeros((t1 - t0, app_dim))
    if person.appearance is None:
        raise FeatureFormatError(f"person {person.id} has no appearance features attached")
    for row, t in enumerate(person.frames):
        if t0 <= t < t1:
            out[t - t0] = person.appearance[row]
    return out


def sample_window(scene: Scene, length: int, rng: np.random.Generator) -> Window:
    if length <= 0 or length > scene.frame_count:
        raise ValidationFailure(
            f"window length {length} must be in [1, {scene.frame_count}]",
            code="invalid_window",
        )
    start = int(rng.integers(0, scene.frame_count - length + 1))
    return (start, start + length)


# -- robustness perturbations -------------------------------------------------


def _ordered(lo: float, hi: float) -> Tuple[float, float]:
    lo, hi = min(lo, hi), max(lo, hi)
    if hi > lo:
        return lo, hi
    if hi < 1.0:
        return lo, min(1.0, lo + MIN_EXTENT)
    return hi - MIN_EXTENT, hi


def perturb_boxes(scene: Scene, sigma: float, seed: int) -> Scene:
    """Add N(0, (sigma*w)^2) / N(0, (sigma*h)^2) noise to every corner coordinate.

    Results are clamped to [0, 1] and corner-ordered so boxes stay valid.
    """
    if sigma < 0:
        raise ValidationFailure(f"sigma must be >= 0, got {sigma}", code="invalid_sigma")
    rng = np.random.default_rng(seed)
    persons = []
    for person in scene.persons:
        frames = person.frames
        noise = rng.standard_normal((len(frames), 4))
        boxes: Dict[int, BoundingBox] = {}
        for row, t in enumerate(frames):
            box = person.boxes[t]
            scale = np.array([box.width, box.height, box.width, box.height]) * sigma
            x0, y0, x1, y1 = np.clip(np.array(box.as_list()) + noise[row] * scale, 0.0, 1.0)
            x0, x1 = _ordered(float(x0), float(x1))
            y0, y1 = _ordered(float(y0), float(y1))
            boxes[t] = BoundingBox(x0, y0, x1, y1)
        persons.append(replace(person, boxes=boxes))
    return replace(scene, persons=tuple(persons))


def drop_detections(scene: Scene, mdr: float, seed: int) -> Scene:
    """Remove each (person, visible frame) independently with probability ``mdr``.

    Persons left without frames disappear; groups shrinking below two
    members are dropped.
    """
    if not 0.0 <= mdr < 1.0:
        raise ValidationFailure(f"missing detection rate must be in [0, 1), got {mdr}", code="invalid_mdr")
    rng = np.random.default_rng(seed)
    persons = []
    for person in scene.persons:
        frames = person.frames
        keep = rng.random(len(frames)) >= mdr
        if not keep.any():
            continue
        boxes = {t: person.boxes[t] for t, k in zip(frames, keep) if k}
        appearance = person.appearance[keep] if person.appearance is not None else None
        persons.append(replace(person, boxes=boxes, appearance=appearance))
    present = {p.id for p in persons}
    groups = []
    for group in scene.groups:
        members = frozenset(m for m in group if m in present)
        if len(members) >= 2:
            groups.append(members)
    removed = len(scene.persons) - len(persons)
    if removed:
        logger.debug("drop_detections removed %d persons entirely (mdr=%g)", removed, mdr)
    return replace(scene, persons=tuple(persons), groups=tuple(groups))


def read_groups(path: Union[str, Path]) -> List[FrozenSet[int]]:
    """Read groups from a groups file (one group per line) or a scene JSON."""

    group_path = Path(path)
    text = group_path.read_text(encoding="utf-8")
    if group_path.suffix == ".json":
        try:
            payload = json.loads(text)
        except json.JSONDecodeError as exc:
            raise SceneFormatError(exc.msg, path=str(group_path), line=exc.lineno) from exc
        return list(scene_from_dict(payload, str(group_path)).groups)
    groups = []
    for number, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            groups.append(frozenset(int(token) for token in line.split()))
        except ValueError as exc:
            raise SceneFormatError(f"non-integer person id in {line!r}", path=str(group_path), line=number) from exc
    return groups


def write_groups(groups: Sequence[FrozenSet[int]], path: Union[str, Path]) -> Path:
    """One group per line, ids ascending, groups ordered by their smallest id."""

    group_path = Path(path)
    group_path.parent.mkdir(parents=True, exist_ok=True)
    rows = sorted(sorted(group) for group in groups)
    group_path.write_text("".join(" ".join(str(i) for i in row) + "\n" for row in rows), encoding="utf-8")
    return group_path
