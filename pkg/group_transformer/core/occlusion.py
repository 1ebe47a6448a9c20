"""Occlusion encoder.

Frames of a person's appearance sequence that look unlike the person's
other visible frames are assumed corrupted by occlusion and are scaled
down. Similarity is measured in an embedding f(x) = relu(L(x)); the kept
appearance is g(x) = relu(L'(x)) weighted by each frame's mean similarity.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict

import numpy as np

from . import tensor as T
from .errors import DimensionError, NotVisibleError
from .layers import Linear
from .tensor import Tensor

logger = logging.getLogger("group-transformer.occlusion")

SIMILARITY_EPS = 1e-12


@dataclass
class OcclusionEncoder:
    """Parameters ``occ.f`` (D_app -> D_f) and ``occ.g`` (D_app -> D_z)."""

    f: Linear
    g: Linear
    use_attention: bool = True

    @classmethod
    def create(
        cls,
        app_dim: int,
        f_dim: int,
        z_dim: int,
        rng: np.random.Generator,
        use_attention: bool = True,
    ) -> "OcclusionEncoder":
        f = Linear.create("occ.f", app_dim, f_dim, rng)
        g = Linear.create("occ.g", app_dim, z_dim, rng)
        return cls(f=f, g=g, use_attention=use_attention)

    def parameters(self) -> Dict[str, Tensor]:
        params = self.g.parameters()
        if self.use_attention:
            params = {**self.f.parameters(), **params}
        return params

    def __call__(self, X: Tensor, vis: np.ndarray) -> Tensor:
        return encode(X, vis, self)


def frame_similarity(fi: np.ndarray, fj: np.ndarray) -> float:
    """Cosine similarity of two relu embeddings; 0 when either is (near) zero."""
    fi = np.asarray(fi, dtype=np.float64)
    fj = np.asarray(fj, dtype=np.float64)
    ni, nj = np.linalg.norm(fi), np.linalg.norm(fj)
    if ni < SIMILARITY_EPS or nj < SIMILARITY_EPS:
        return 0.0
    return float(fi @ fj / (ni * nj + SIMILARITY_EPS))


def _visibility(vis: np.ndarray, frames: int) -> np.ndarray:
    vis = np.asarray(vis, dtype=bool)
    if vis.shape[-1] != frames:
        raise DimensionError("attention_values", vis.shape, (frames,), "mask length must equal frame count")
    if not vis.any(axis=-1).all():
        raise NotVisibleError("attention needs at least one visible frame per sequence")
    return vis


def attention_values(F: Tensor, vis: np.ndarray) -> Tensor:
    """Mean similarity of each visible frame to all visible frames (itself included).

    ``F`` is [T, D_f] or batched [N, T, D_f]; ``vis`` is [T] or [N, T].
    Invisible frames get attention 0.
    """
    F = T.as_tensor(F)
    vis = _visibility(vis, F.shape[-2])
    mask = vis.astype(np.float64)
    sim = T.cosine_similarity(F, eps=SIMILARITY_EPS, min_norm=SIMILARITY_EPS)
    counts = mask.sum(axis=-1, keepdims=True)
    # a_i = sum_j s_ij [j visible] / |visible|, zeroed where i is invisible
    totals = T.sum(T.mul(sim, mask[..., None, :]), axis=-1)
    return T.mul(totals, mask / counts)


def encode(X: Tensor, vis: np.ndarray, encoder: OcclusionEncoder) -> Tensor:
    """Z[t] = g(X[t]) * a[t] for [..., T, D_app] inputs; invisible rows are zero."""
    X = T.as_tensor(X)
    if X.shape[-1] != encoder.g.in_features:
        raise DimensionError("occlusion.encode", X.shape, encoder.g.W.shape)
    vis = _visibility(vis, X.shape[-2])
    kept = T.relu(encoder.g(X))
    if encoder.use_attention:
        weights = attention_values(T.relu(encoder.f(X)), vis)
    else:
        weights = Tensor(vis.astype(np.float64))
    return T.mul(kept, T.reshape(weights, (*weights.shape, 1)))
