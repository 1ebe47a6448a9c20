"""Edge classifier: person-pair features and relation logits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Literal, Optional, Sequence

import numpy as np

from . import tensor as T
from .errors import DimensionError, NotVisibleError, ValidationFailure
from .layers import Linear
from .stt import SttOutputs
from .tensor import Tensor


@dataclass(frozen=True)
class Edge:
    """Undirected person pair, stored once with ``u < v``."""

    u: int
    v: int
    label: Optional[int] = None
    score: Optional[float] = None

    def __post_init__(self) -> None:
        if self.u >= self.v:
            raise ValidationFailure(f"edge ({self.u}, {self.v}) must satisfy u < v", code="invalid_edge")
        if self.label not in (None, 0, 1):
            raise ValidationFailure(f"edge label must be 0 or 1, got {self.label}", code="invalid_edge")

    @classmethod
    def between(cls, a: int, b: int, label: Optional[int] = None) -> "Edge":
        return cls(min(a, b), max(a, b), label)


@dataclass
class EdgeHead:
    classifier: Linear
    pooling: Literal["covisible", "all"] = "covisible"

    @classmethod
    def create(cls, in_features: int, rng: np.random.Generator, pooling: Literal["covisible", "all"] = "covisible") -> "EdgeHead":
        return cls(classifier=Linear.create("head.cls", in_features, 1, rng), pooling=pooling)

    def parameters(self) -> Dict[str, Tensor]:
        return self.classifier.parameters()


def collect_individual_features(outputs: SttOutputs) -> Tensor:
    """Concatenate appearance depths then trajectory depths along channels."""
    parts = [*outputs.app, *outputs.traj]
    if not parts:
        raise DimensionError("collect_individual_features", (), (), "no block outputs")
    lead = parts[0].shape
    for part in parts:
        if part.ndim != 3 or part.shape[0] != lead[0] or part.shape[2] != lead[2]:
            raise DimensionError("collect_individual_features", lead, part.shape)
    return T.concat(parts, axis=1)


def edge_feature(z_u: Tensor, z_v: Tensor) -> Tensor:
    """|Z_u - Z_v| elementwise; works on single [C, T] or batched [E, C, T] inputs."""
    z_u, z_v = T.as_tensor(z_u), T.as_tensor(z_v)
    if z_u.shape != z_v.shape:
        raise DimensionError("edge_feature", z_u.shape, z_v.shape)
    return T.absolute(T.sub(z_u, z_v))


def pool_weights(covis: np.ndarray, pooling: Literal["covisible", "all"]) -> np.ndarray:
    covis = np.atleast_2d(np.asarray(covis, dtype=bool))
    if not covis.any(axis=1).all():
        raise NotVisibleError("edge has no co-visible frame")
    if pooling == "all":
        return np.full(covis.shape, 1.0 / covis.shape[1])
    return covis / covis.sum(axis=1, keepdims=True)


def edge_scores(F: Tensor, covis: np.ndarray, head: EdgeHead) -> Tensor:
    """Logits [E] for edge features [E, C, T]: per-frame linear scores averaged over frames."""
    F = T.as_tensor(F)
    if F.ndim != 3 or F.shape[1] != head.classifier.in_features:
        raise DimensionError("edge_score", F.shape, head.classifier.W.shape)
    edges, channels, frames = F.shape
    weights = pool_weights(covis, head.pooling)
    if weights.shape != (edges, frames):
        raise DimensionError("edge_score", F.shape, weights.shape, "co-visibility mask")
    rows = T.reshape(T.transpose(F, (0, 2, 1)), (edges * frames, channels))
    per_frame = T.reshape(head.classifier(rows), (edges, frames))
    return T.sum(T.mul(per_frame, weights), axis=1)


def edge_score(F: Tensor, covis: np.ndarray, head: EdgeHead) -> Tensor:
    """Logit of a single edge from its [C, T] feature."""
    F = T.as_tensor(F)
    return T.reshape(edge_scores(T.reshape(F, (1, *F.shape)), np.asarray(covis)[None, :], head), ())


def score_pairs(Z_all: Tensor, rows_u: Sequence[int], rows_v: Sequence[int], covis: np.ndarray, head: EdgeHead) -> Tensor:
    """Logits for person-row pairs of an individual feature tensor [N, C, T]."""
    F = edge_feature(T.take(Z_all, rows_u, axis=0), T.take(Z_all, rows_v, axis=0))
    return edge_scores(F, covis, head)
