"""Stacked spatio-temporal transformer blocks.

Each block pairs a temporal branch (three densely connected width-3
convolutions over a person's trajectory features) with a spatial branch
(a transformer encoder that mixes persons within each frame; time acts as
the batch axis).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from ..models import ArchConfig
from . import tensor as T
from .errors import DimensionError
from .layers import BatchNorm, Conv1d, LayerNorm, Linear, kaiming_uniform
from .tensor import Tensor, parameter

logger = logging.getLogger("group-transformer.stt")

Mode = Literal["train", "eval"]
MASKED_SCORE = -1e9


@dataclass
class TemporalBranch:
    convs: List[Conv1d]
    norms: List[BatchNorm]

    @classmethod
    def create(cls, prefix: str, in_channels: int, widths: Sequence[int], rng: np.random.Generator) -> "TemporalBranch":
        convs, norms = [], []
        channels = in_channels
        for k, width in enumerate(widths, start=1):
            convs.append(Conv1d.create(f"{prefix}.conv{k}", channels, width, rng))
            norms.append(BatchNorm.create(f"{prefix}.bn{k}", width))
            channels += width
        return cls(convs=convs, norms=norms)

    @property
    def in_channels(self) -> int:
        return self.convs[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.convs[-1].out_channels

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for conv, norm in zip(self.convs, self.norms):
            params.update(conv.parameters())
            params.update(norm.parameters())
        return params

    def __call__(self, x: Tensor, mode: Mode) -> Tensor:
        return temporal_branch(x, self, mode)


def temporal_branch(x: Tensor, branch: TemporalBranch, mode: Mode) -> Tensor:
    """[N, C, T] -> [N, C_out, T]; block k sees the input and every earlier output."""
    x = T.as_tensor(x)
    if x.ndim != 3 or x.shape[1] != branch.in_channels:
        raise DimensionError("temporal_branch", x.shape, branch.convs[0].W.shape, "input channels")
    features = [x]
    out = x
    for conv, norm in zip(branch.convs, branch.norms):
        dense = features[0] if len(features) == 1 else T.concat(features, axis=1)
        out = T.relu(norm(conv(dense), mode))
        features.append(out)
    return out


@dataclass
class EncoderLayer:
    """Multi-head self-attention (bias-free projections) plus a relu feed-forward."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ff1: Linear
    ff2: Linear
    ln1: LayerNorm
    ln2: LayerNorm
    heads: int
    residual: Literal["value", "canonical"] = "value"

    @classmethod
    def create(
        cls,
        prefix: str,
        width: int,
        heads: int,
        ff_dim: int,
        residual: Literal["value", "canonical"],
        rng: np.random.Generator,
    ) -> "EncoderLayer":
        def square(name: str) -> Tensor:
            return parameter(kaiming_uniform(rng, (width, width), width), f"{prefix}.{name}")

        return cls(
            wq=square("wq"),
            wk=square("wk"),
            wv=square("wv"),
            wo=square("wo"),
            ff1=Linear.create(f"{prefix}.ff1", width, ff_dim, rng),
            ff2=Linear.create(f"{prefix}.ff2", ff_dim, width, rng),
            ln1=LayerNorm.create(f"{prefix}.ln1", width),
            ln2=LayerNorm.create(f"{prefix}.ln2", width),
            heads=heads,
            residual=residual,
        )

    def parameters(self) -> Dict[str, Tensor]:
        params = {w.name: w for w in (self.wq, self.wk, self.wv, self.wo)}
        for part in (self.ff1, self.ff2, self.ln1, self.ln2):
            params.update(part.parameters())
        return params

    def attention(self, x: Tensor, key_bias: Optional[np.ndarray] = None) -> Tuple[Tensor, Tensor]:
        """Per-frame attention over persons for x of shape [T, N, D].

        Returns (wo-projected output, attention weights [T, H, N, N]). In
        ``value`` mode the residual joins the values: softmax(QK^T/sqrt(d))V + V.
        """
        frames, persons, width = x.shape
        dh = width // self.heads

        def split(t: Tensor) -> Tensor:
            return T.transpose(T.reshape(t, (frames, persons, self.heads, dh)), (0, 2, 1, 3))

        q, k, v = split(x @ self.wq), split(x @ self.wk), split(x @ self.wv)
        scores = T.mul(q @ T.transpose(k, (0, 1, 3, 2)), 1.0 / np.sqrt(dh))
        if key_bias is not None:
            scores = T.add(scores, key_bias)
        weights = T.softmax_lastdim(scores)
        mixed = weights @ v
        if self.residual == "value":
            mixed = T.add(mixed, v)
        merged = T.reshape(T.transpose(mixed, (0, 2, 1, 3)), (frames, persons, width))
        return merged @ self.wo, weights

    def feed_forward(self, x: Tensor) -> Tensor:
        return self.ff2(T.relu(self.ff1(x)))

    def __call__(self, x: Tensor, key_bias: Optional[np.ndarray] = None) -> Tensor:
        attended, _ = self.attention(self.ln1(x), key_bias)
        if self.residual == "canonical":
            hidden = T.add(x, attended)
            return T.add(hidden, self.feed_forward(self.ln2(hidden)))
        return self.feed_forward(self.ln2(attended))


@dataclass
class SpatialBranch:
    """Input projection followed by either the encoder or (ablation) a per-person MLP."""

    proj: Linear
    layers: List[EncoderLayer] = field(default_factory=list)
    mlp: Optional[Linear] = None

    @classmethod
    def create(cls, prefix: str, app_dim: int, traj_dim: int, arch: ArchConfig, rng: np.random.Generator) -> "SpatialBranch":
        proj = Linear.create(f"{prefix}.proj", app_dim + traj_dim, arch.model_dim, rng)
        if arch.variant == "no_transformer":
            return cls(proj=proj, mlp=Linear.create(f"{prefix}.mlp", arch.model_dim, arch.model_dim, rng))
        layers = [
            EncoderLayer.create(f"{prefix}.enc{l}", arch.model_dim, arch.heads, arch.ff_dim, arch.residual, rng)
            for l in range(1, arch.encoder_layers + 1)
        ]
        return cls(proj=proj, layers=layers)

    @property
    def in_features(self) -> int:
        return self.proj.in_features

    def parameters(self) -> Dict[str, Tensor]:
        params = self.proj.parameters()
        for layer in self.layers:
            params.update(layer.parameters())
        if self.mlp is not None:
            params.update(self.mlp.parameters())
        return params

    def __call__(self, z_app: Tensor, z_traj: Tensor, vis: Optional[np.ndarray] = None) -> Tensor:
        return spatial_branch(z_app, z_traj, self, vis)


def key_mask_bias(vis: Optional[np.ndarray]) -> Optional[np.ndarray]:
    """[T, 1, 1, N] additive scores hiding persons invisible in a frame.

    Frames where nobody is visible are left unmasked.
    """
    if vis is None:
        return None
    visible = np.asarray(vis, dtype=bool).T  # [T, N]
    visible = visible | ~visible.any(axis=1, keepdims=True)
    if visible.all():
        return None
    return np.where(visible, 0.0, MASKED_SCORE)[:, None, None, :]


def spatial_branch(
    z_app: Tensor,
    z_traj: Tensor,
    branch: SpatialBranch,
    vis: Optional[np.ndarray] = None,
) -> Tensor:
    """[N, D_app, T] + [N, D_traj, T] -> [N, D_model, T], attention within each frame."""
    z_app, z_traj = T.as_tensor(z_app), T.as_tensor(z_traj)
    if z_app.ndim != 3 or z_traj.ndim != 3 or z_app.shape[0] != z_traj.shape[0] or z_app.shape[2] != z_traj.shape[2]:
        raise DimensionError("spatial_branch", z_app.shape, z_traj.shape)
    if z_app.shape[1] + z_traj.shape[1] != branch.in_features:
        raise DimensionError("spatial_branch", z_app.shape, z_traj.shape, f"concat width must be {branch.in_features}")
    joined = T.transpose(T.concat([z_app, z_traj], axis=1), (2, 0, 1))  # [T, N, C]
    x = branch.proj(joined)
    if branch.mlp is not None:
        x = branch.mlp(T.relu(x))
    else:
        bias = key_mask_bias(vis)
        for layer in branch.layers:
            x = layer(x, bias)
    return T.transpose(x, (1, 2, 0))


@dataclass
class SttBlock:
    temporal: TemporalBranch
    spatial: Optional[SpatialBranch]

    def parameters(self) -> Dict[str, Tensor]:
        params = self.temporal.parameters()
        if self.spatial is not None:
            params.update(self.spatial.parameters())
        return params

    def batchnorms(self) -> List[BatchNorm]:
        return list(self.temporal.norms)


@dataclass
class SttOutputs:
    """Per-depth outputs, each [N, C, T]; ``app`` is empty without appearance."""

    app: List[Tensor]
    traj: List[Tensor]


@dataclass
class SttStack:
    blocks: List[SttBlock]

    @classmethod
    def create(cls, arch: ArchConfig, rng: np.random.Generator) -> "SttStack":
        blocks = []
        traj_in, app_in = arch.traj_channels, arch.z_dim
        for m in range(1, arch.depth + 1):
            temporal = TemporalBranch.create(f"stt{m}.t", traj_in, arch.conv_channels, rng)
            spatial = None
            if arch.uses_appearance:
                spatial = SpatialBranch.create(f"stt{m}.s", app_in, temporal.out_channels, arch, rng)
            blocks.append(SttBlock(temporal=temporal, spatial=spatial))
            traj_in, app_in = temporal.out_channels, arch.model_dim
        return cls(blocks=blocks)

    def parameters(self) -> Dict[str, Tensor]:
        params: Dict[str, Tensor] = {}
        for block in self.blocks:
            params.update(block.parameters())
        return params

    def batchnorms(self) -> List[BatchNorm]:
        return [norm for block in self.blocks for norm in block.batchnorms()]


def stt_forward(
    stack: SttStack,
    z_app: Optional[Tensor],
    z_traj: Tensor,
    mode: Mode = "train",
    vis: Optional[np.ndarray] = None,
) -> SttOutputs:
    """Run every block: traj_{m+1} = temporal_m(traj_m); app_{m+1} = spatial_m(app_m, traj_{m+1})."""
    outputs = SttOutputs(app=[], traj=[])
    for block in stack.blocks:
        z_traj = block.temporal(z_traj, mode)
        outputs.traj.append(z_traj)
        if block.spatial is not None:
            if z_app is None:
                raise DimensionError("stt_forward", (), z_traj.shape, "appearance input missing")
            z_app = block.spatial(z_app, z_traj, vis)
            outputs.app.append(z_app)
    return outputs
