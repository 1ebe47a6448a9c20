"""Synthetic crowd scenes with ground-truth groups.

Groups follow a shared velocity random walk with members on a ring around
the group centroid. The last groups copy an earlier group's velocity from
just outside its ring; singletons walk alone, and some of them shadow a
group the same way. Both act as hard negatives that only appearance
separates. Appearance is a unit identity embedding plus per-frame noise,
and overlapping boxes corrupt the occluded person's feature with the
occluder's identity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

from ..models import GenConfig
from .errors import GenerationError, ValidationFailure
from .scene import BoundingBox, Scene, TrackedPerson, save_scene, validate_scene, write_features

logger = logging.getLogger("group-transformer.synthetic")

MANIFEST_NAME = "manifest.tsv"


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def box_iou(boxes: np.ndarray) -> np.ndarray:
    """Pairwise IoU of [N, 4] corner boxes."""
    x0 = np.maximum(boxes[:, None, 0], boxes[None, :, 0])
    y0 = np.maximum(boxes[:, None, 1], boxes[None, :, 1])
    x1 = np.minimum(boxes[:, None, 2], boxes[None, :, 2])
    y1 = np.minimum(boxes[:, None, 3], boxes[None, :, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    union = area[:, None] + area[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@dataclass
class _Walker:
    """Center trajectory [T, 2] plus the velocities that produced it."""

    centers: np.ndarray
    velocities: np.ndarray


class _Motion:
    def __init__(self, config: GenConfig, rng: np.random.Generator) -> None:
        self.config = config
        self.rng = rng
        # one horizontal frame-width unit is `aspect` vertical units
        self.scale = np.array([1.0, config.frame_aspect])
        self.low = np.array([config.box_width, config.box_height]) / 2
        self.high = 1.0 - self.low

    def _initial_velocity(self) -> np.ndarray:
        angle = self.rng.uniform(0, 2 * np.pi)
        speed = self.rng.uniform(0.3, 1.0) * self.config.max_speed
        return speed * np.array([np.cos(angle), np.sin(angle)])

    def walk(self, start: np.ndarray, margin: float = 0.0) -> _Walker:
        """Reflecting random walk; ``margin`` (width units) keeps a ring inside the frame."""
        cfg = self.config
        low = self.low + margin * self.scale
        high = self.high - margin * self.scale
        frames = cfg.frame_count
        centers = np.zeros((frames, 2))
        velocities = np.zeros((frames, 2))
        position, velocity = np.clip(start, low, high), self._initial_velocity()
        for t in range(frames):
            centers[t] = position
            velocities[t] = velocity
            velocity = velocity + self.rng.normal(0.0, cfg.walk_speed, 2)
            speed = np.linalg.norm(velocity)
            if speed > cfg.max_speed:
                velocity *= cfg.max_speed / speed
            position = position + velocity * self.scale
            for axis in range(2):
                if position[axis] < low[axis] or position[axis] > high[axis]:
                    velocity[axis] = -velocity[axis]
                    position[axis] = np.clip(position[axis], low[axis], high[axis])
        return _Walker(centers=centers, velocities=velocities)

    def follow(self, leader: _Walker, offset: np.ndarray, margin: float = 0.0) -> _Walker:
        """Copy the leader's velocities from a displaced start, clamped to the frame."""
        low = self.low + margin * self.scale
        high = self.high - margin * self.scale
        centers = np.zeros_like(leader.centers)
        position = np.clip(leader.centers[0] + offset * self.scale, low, high)
        for t in range(len(centers)):
            centers[t] = position
            position = np.clip(position + leader.velocities[t] * self.scale, low, high)
        return _Walker(centers=centers, velocities=leader.velocities)

    def displacement(self, low: float, high: float) -> np.ndarray:
        """Random direction times a distance drawn from [low, high] (width units)."""
        angle = self.rng.uniform(0, 2 * np.pi)
        return self.rng.uniform(low, high) * np.array([np.cos(angle), np.sin(angle)])

    def random_start(self, margin: float = 0.0) -> np.ndarray:
        low = self.low + margin * self.scale
        high = self.high - margin * self.scale
        return self.rng.uniform(low, high)


def _check_cohesion(config: GenConfig) -> float:
    ring = 0.6 * config.cohesion_radius
    if config.group_size_max >= 2 and config.n_groups:
        chord = 2 * ring * np.sin(np.pi / config.group_size_max)
        if chord < config.box_width:
            raise GenerationError(
                f"cohesion_radius {config.cohesion_radius} is too small for groups of "
                f"{config.group_size_max} with box_width {config.box_width}",
                details={"chord": chord, "box_width": config.box_width},
            )
    return ring


def generate(config: GenConfig) -> Scene:
    """One scene with appearance features attached; deterministic per ``config.seed``."""
    ring = _check_cohesion(config)
    rng = np.random.default_rng(config.seed)
    motion = _Motion(config, rng)
    frames = config.frame_count
    centers: List[np.ndarray] = []
    identities: List[np.ndarray] = []
    groups: List[frozenset] = []
    leaders: List[_Walker] = []
    share = config.group_appearance_share
    radius = config.cohesion_radius
    independent = max(1, config.n_groups - config.parallel_groups)

    for g in range(config.n_groups):
        size = int(rng.integers(config.group_size_min, config.group_size_max + 1))
        if g < independent:
            leader = motion.walk(motion.random_start(radius), margin=radius)
        else:
            # walks beside an earlier group, just outside its ring
            anchor = leaders[g % independent]
            leader = motion.follow(anchor, motion.displacement(1.6 * radius, 2.2 * radius), margin=radius)
        leaders.append(leader)
        style = _unit(rng, config.app_dim)
        phase = rng.uniform(0, 2 * np.pi)
        members = []
        for k in range(size):
            angle = phase + 2 * np.pi * k / size
            jitter = rng.normal(0.0, 0.1 * ring, (frames, 2))
            offset = ring * np.array([np.cos(angle), np.sin(angle)]) + jitter
            norm = np.linalg.norm(offset, axis=1, keepdims=True)
            offset = np.where(norm > radius, offset * radius / norm, offset)
            members.append(len(centers))
            centers.append(np.clip(leader.centers + offset * motion.scale, motion.low, motion.high))
            identity = share * style + (1.0 - share) * _unit(rng, config.app_dim)
            identities.append(identity / np.linalg.norm(identity))
        groups.append(frozenset(members))

    for s in range(config.n_singletons):
        if s < config.parallel_singletons and leaders:
            leader = leaders[s % len(leaders)]
            centers.append(motion.follow(leader, motion.displacement(1.3 * radius, 1.8 * radius)).centers)
        else:
            centers.append(motion.walk(motion.random_start()).centers)
        identities.append(_unit(rng, config.app_dim))

    n = len(centers)
    half = np.array([config.box_width, config.box_height]) / 2
    track = np.stack(centers) if n else np.zeros((0, frames, 2))  # [N, T, 2]
    boxes = np.concatenate([track - half, track + half], axis=-1)  # [N, T, 4]
    boxes = np.clip(boxes, 0.0, 1.0)
    identity = np.stack(identities) if n else np.zeros((0, config.app_dim))
    appearance = identity[:, None, :] + rng.normal(0.0, config.appearance_noise, (n, frames, config.app_dim))

    occluded = 0
    for t in range(frames):
        if n < 2:
            break
        iou = box_iou(boxes[:, t])
        np.fill_diagonal(iou, 0.0)
        for i in range(n):
            # occluders sit nearer the camera, i.e. lower in the frame
            candidates = np.flatnonzero((iou[i] > config.occlusion_iou) & (boxes[:, t, 3] > boxes[i, t, 3]))
            if candidates.size == 0:
                continue
            j = int(candidates[np.argmax(iou[i, candidates])])
            noise = rng.normal(0.0, config.appearance_noise, config.app_dim)
            w = config.occlusion_weight
            appearance[i, t] = (1.0 - w) * identity[i] + w * identity[j] + noise
            occluded += 1
    logger.debug("Generated %d persons, %d groups, %d occluded frames (seed %d)", n, len(groups), occluded, config.seed)

    appearance = appearance.astype(np.float32).astype(np.float64)
    persons = tuple(
        TrackedPerson(
            id=i,
            boxes={t: BoundingBox(*(float(c) for c in boxes[i, t])) for t in range(frames)},
            appearance=appearance[i],
        )
        for i in range(n)
    )
    return validate_scene(
        Scene(frame_count=frames, app_dim=config.app_dim, persons=persons, groups=tuple(groups))
    )


def derived_seeds(seed: int, count: int) -> List[int]:
    return [int(child.generate_state(1)[0]) for child in np.random.SeedSequence(seed).spawn(count)]


def generate_corpus(
    config: GenConfig,
    n_scenes: int,
    out_dir: Union[str, Path],
    seed: Optional[int] = None,
) -> Path:
    """Write ``n_scenes`` scene/feature pairs plus a tab-separated manifest; returns its path."""
    if n_scenes < 1:
        raise ValidationFailure(f"n_scenes must be >= 1, got {n_scenes}", code="invalid_count")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for index, scene_seed in enumerate(derived_seeds(config.seed if seed is None else seed, n_scenes)):
        scene = generate(config.model_copy(update={"seed": scene_seed}))
        scene_path = save_scene(scene, root / f"scene_{index:03d}.json")
        feature_path = write_features(scene, root / f"scene_{index:03d}.gtft")
        rows.append(f"{scene_path.name}\t{feature_path.name}\n")
    manifest = root / MANIFEST_NAME
    manifest.write_text("".join(rows), encoding="utf-8")
    logger.info("Wrote %d scenes to %s", n_scenes, root)
    return manifest


def read_manifest(path: Union[str, Path]) -> List[Tuple[Path, Path]]:
    """(scene, features) path pairs; relative entries resolve against the manifest's directory."""
    manifest = Path(path)
    pairs = []
    for number, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise ValidationFailure(
                f"{manifest}:{number}: expected 'scene<TAB>features'",
                code="invalid_manifest",
                details={"path": str(manifest), "line": number},
            )
        pairs.append(tuple(manifest.parent / part.strip() for part in parts))
    return pairs


def occlusion_counts(scene: Scene, config: GenConfig) -> Dict[int, int]:
    """Frames per person whose box is overlapped (IoU > threshold) by a box lower in the frame."""
    counts: Dict[int, int] = {p.id: 0 for p in scene.persons}
    for t in range(scene.frame_count):
        present = [p for p in scene.persons if t in p.boxes]
        if len(present) < 2:
            continue
        boxes = np.array([p.boxes[t].as_list() for p in present])
        iou = box_iou(boxes)
        np.fill_diagonal(iou, 0.0)
        for i, person in enumerate(present):
            if np.any((iou[i] > config.occlusion_iou) & (boxes[:, 3] > boxes[i, 3])):
                counts[person.id] += 1
    return counts
