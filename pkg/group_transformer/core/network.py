"""The assembled model, its input batches, and the GTCK checkpoint format.

Checkpoint layout (little-endian): magic "GTCK", u32 version=1, u32
entry_count, then per entry u16 name_len, UTF-8 name, u8 rank, rank x u32
dims and float32 data in row-major order. Besides parameters and batchnorm
running statistics the file carries the architecture as ``meta.<field>``
entries so a checkpoint can be loaded without its config.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union, get_args

import numpy as np

from ..models import ArchConfig, Variant
from . import tensor as T
from .edge_head import EdgeHead, collect_individual_features, score_pairs
from .errors import CheckpointError, FeatureFormatError, NotVisibleError
from .occlusion import OcclusionEncoder
from .scene import Scene, Window, appearance_window, build_trajectory_features
from .stt import SttOutputs, SttStack, stt_forward
from .tensor import Tensor

logger = logging.getLogger("group-transformer.network")

CHECKPOINT_MAGIC = b"GTCK"
CHECKPOINT_VERSION = 1

_ENUMS: Dict[str, Tuple[str, ...]] = {
    "residual": ("value", "canonical"),
    "pooling": ("covisible", "all"),
    "variant": get_args(Variant),
}


@dataclass(frozen=True)
class PersonBatch:
    """Model inputs for a set of persons over one window."""

    person_ids: Tuple[int, ...]
    window: Window
    trajectories: np.ndarray  # [N, 5, T]
    appearance: Optional[np.ndarray]  # [N, T, D_app]
    visibility: np.ndarray  # [N, T]

    @classmethod
    def from_scene(
        cls,
        scene: Scene,
        person_ids: Sequence[int],
        window: Optional[Window] = None,
        with_appearance: bool = True,
    ) -> "PersonBatch":
        window = window or (0, scene.frame_count)
        trajectories, appearance = [], []
        for person_id in person_ids:
            person = scene.person(person_id)
            traj = build_trajectory_features(person, window)
            if traj.empty:
                raise NotVisibleError(
                    f"person {person_id} is not visible in frames [{window[0]}, {window[1]})",
                    details={"person": person_id},
                )
            trajectories.append(traj.values)
            if with_appearance:
                appearance.append(appearance_window(person, window, scene.app_dim))
        traj_array = np.stack(trajectories)
        return cls(
            person_ids=tuple(person_ids),
            window=window,
            trajectories=traj_array,
            appearance=np.stack(appearance) if with_appearance else None,
            visibility=traj_array[:, 4, :] > 0,
        )

    def __len__(self) -> int:
        return len(self.person_ids)

    def rows(self) -> Dict[int, int]:
        return {person_id: row for row, person_id in enumerate(self.person_ids)}

    def covisibility(self, rows_u: Sequence[int], rows_v: Sequence[int]) -> np.ndarray:
        return self.visibility[list(rows_u)] & self.visibility[list(rows_v)]


class GroupTransformer:
    """Occlusion encoder, stacked STT blocks and the edge classifier."""

    def __init__(self, arch: Optional[ArchConfig] = None, seed: int = 0) -> None:
        self.arch = arch or ArchConfig()
        self.mode: Literal["train", "eval"] = "train"
        rng = np.random.default_rng(seed)
        self.occlusion: Optional[OcclusionEncoder] = None
        if self.arch.uses_appearance:
            self.occlusion = OcclusionEncoder.create(
                self.arch.app_dim,
                self.arch.f_dim,
                self.arch.z_dim,
                rng,
                use_attention=self.arch.variant != "no_occlusion",
            )
        self.stack = SttStack.create(self.arch, rng)
        self.head = EdgeHead.create(self.arch.edge_dim, rng, pooling=self.arch.pooling)

    def train(self) -> "GroupTransformer":
        self.mode = "train"
        return self

    def eval(self) -> "GroupTransformer":
        self.mode = "eval"
        return self

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        if self.occlusion is not None:
            params.update(self.occlusion.parameters())
        params.update(self.stack.parameters())
        params.update(self.head.parameters())
        return params

    def buffers(self) -> Dict[str, np.ndarray]:
        buffers: Dict[str, np.ndarray] = {}
        for norm in self.stack.batchnorms():
            buffers.update(norm.buffers())
        return buffers

    def forward(self, batch: PersonBatch) -> SttOutputs:
        z_app = None
        if self.occlusion is not None:
            if batch.appearance is None:
                raise FeatureFormatError("model uses appearance but the batch carries none")
            encoded = self.occlusion(Tensor(batch.appearance), batch.visibility)  # [N, T, D_z]
            z_app = T.transpose(encoded, (0, 2, 1))
        return stt_forward(self.stack, z_app, Tensor(batch.trajectories), self.mode, batch.visibility)

    def individual_features(self, batch: PersonBatch) -> Tensor:
        return collect_individual_features(self.forward(batch))

    def score(self, batch: PersonBatch, pairs: Sequence[Tuple[int, int]]) -> Tensor:
        """Logits for (person id, person id) pairs of ``batch``."""
        index = batch.rows()
        rows_u = [index[u] for u, _ in pairs]
        rows_v = [index[v] for _, v in pairs]
        Z_all = self.individual_features(batch)
        return score_pairs(Z_all, rows_u, rows_v, batch.covisibility(rows_u, rows_v), self.head)

    # -- checkpoints ----------------------------------------------------------

    def state_entries(self) -> Dict[str, np.ndarray]:
        entries: Dict[str, np.ndarray] = {}
        for key, value in self.arch.model_dump().items():
            if key in _ENUMS:
                value = _ENUMS[key].index(value)
            entries[f"meta.{key}"] = np.asarray(value, dtype=np.float64)
        entries.update({name: p.data for name, p in self.parameters().items()})
        entries.update(self.buffers())
        return entries

    def save(self, path: Union[str, Path]) -> Path:
        entries = self.state_entries()
        chunks = [struct.pack("<4sII", CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(entries))]
        for name, value in entries.items():
            encoded = name.encode("utf-8")
            array = np.ascontiguousarray(value, dtype="<f4")
            chunks.append(struct.pack("<H", len(encoded)) + encoded)
            chunks.append(struct.pack(f"<B{array.ndim}I", array.ndim, *array.shape))
            chunks.append(array.tobytes())
        checkpoint = Path(path)
        checkpoint.parent.mkdir(parents=True, exist_ok=True)
        checkpoint.write_bytes(b"".join(chunks))
        logger.info("Saved checkpoint %s (%d entries)", checkpoint, len(entries))
        return checkpoint

    @classmethod
    def load(cls, path: Union[str, Path]) -> "GroupTransformer":
        checkpoint = Path(path)
        entries = read_checkpoint(checkpoint)
        arch = _arch_from_entries(entries, checkpoint)
        model = cls(arch)
        params = model.parameters()
        missing = [name for name in params if name not in entries]
        if missing:
            raise CheckpointError(f"{checkpoint}: missing parameters {missing[:5]}", details={"missing": missing})
        norms = {norm.name: norm for norm in model.stack.batchnorms()}
        known = set(params) | {f"{n}.{s}" for n in norms for s in ("rm", "rv")}
        unknown = [name for name in entries if not name.startswith("meta.") and name not in known]
        if unknown:
            raise CheckpointError(f"{checkpoint}: unknown entries {unknown[:5]}", details={"unknown": unknown})
        for name, param in params.items():
            if entries[name].shape != param.shape:
                raise CheckpointError(
                    f"{checkpoint}: {name} has shape {entries[name].shape}, expected {param.shape}",
                    details={"entry": name},
                )
            param.data = entries[name].astype(np.float64)
        for name, norm in norms.items():
            if f"{name}.rm" in entries and f"{name}.rv" in entries:
                norm.load_buffers(entries[f"{name}.rm"], entries[f"{name}.rv"])
        return model.eval()


def read_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, count = struct.unpack_from("<4sII", blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    offset = 12
    entries: Dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (length,) = struct.unpack_from("<H", blob, offset)
            offset += 2
            name = blob[offset : offset + length].decode("utf-8")
            offset += length
            (rank,) = struct.unpack_from("<B", blob, offset)
            offset += 1
            dims = struct.unpack_from(f"<{rank}I", blob, offset)
            offset += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if offset + 4 * size > len(blob):
                raise CheckpointError(f"{path}: truncated data for {name!r}")
            entries[name] = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(dims).copy()
            offset += 4 * size
    except (struct.error, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt entry table ({exc})") from exc
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return entries


def _arch_from_entries(entries: Dict[str, np.ndarray], source: Path) -> ArchConfig:
    values: Dict[str, object] = {}
    for field_name in ArchConfig.model_fields:
        key = f"meta.{field_name}"
        if key not in entries:
            raise CheckpointError(f"{source}: missing {key}", details={"entry": key})
        raw = entries[key]
        if field_name in _ENUMS:
            values[field_name] = _ENUMS[field_name][int(raw)]
        elif raw.ndim:
            values[field_name] = tuple(int(v) for v in raw)
        else:
            values[field_name] = int(raw)
    return ArchConfig(**values)


def parameter_count(model: GroupTransformer) -> int:
    return sum(p.size for p in model.parameters().values())


def parameter_shapes(model: GroupTransformer) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(name, p.shape) for name, p in model.parameters().items()]
