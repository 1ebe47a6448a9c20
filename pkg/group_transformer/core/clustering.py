"""Affinity-matrix clustering: label propagation and spectral clustering."""

from __future__ import annotations

import logging
from typing import Dict, FrozenSet, List, Optional, Sequence

import numpy as np
from scipy.linalg import eigh
from sklearn.cluster import KMeans

from .errors import ClusteringError

logger = logging.getLogger("group-transformer.clustering")

EIGENGAP_CANDIDATES = 10


def _check_affinity(A: np.ndarray) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ClusteringError(f"affinity must be square, got shape {A.shape}")
    if np.any(A < 0):
        raise ClusteringError("affinity has negative entries")
    if not np.allclose(A, A.T, rtol=0.0, atol=1e-12):
        raise ClusteringError("affinity is not symmetric")
    return A


def label_propagation(A: np.ndarray, max_iters: int = 100, seed: int = 0) -> np.ndarray:
    """Asynchronous label propagation.

    Nodes start with their own index as label and are swept in a seeded
    random order; each adopts the neighbour label with the largest incident
    affinity mass (ties go to the smallest label). Stops after a sweep
    without changes or after ``max_iters`` sweeps.
    """
    A = _check_affinity(A)
    n = A.shape[0]
    labels = np.arange(n)
    rng = np.random.default_rng(seed)
    for sweep in range(1, max_iters + 1):
        changed = 0
        for u in rng.permutation(n):
            weights = A[u].copy()
            weights[u] = 0.0
            neighbours = np.flatnonzero(weights > 0)
            if neighbours.size == 0:
                continue
            mass = np.bincount(labels[neighbours], weights=weights[neighbours], minlength=n)
            best = int(np.flatnonzero(mass == mass.max())[0])
            if best != labels[u]:
                labels[u] = best
                changed += 1
        if not changed:
            logger.debug("Label propagation converged after %d sweeps", sweep)
            break
    else:
        logger.info("Label propagation stopped at max_iters=%d without converging", max_iters)
    return labels


def _farthest_first(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    chosen = [int(rng.integers(points.shape[0]))]
    closest = np.linalg.norm(points - points[chosen[0]], axis=1)
    for _ in range(1, k):
        nxt = int(np.argmax(closest))
        chosen.append(nxt)
        closest = np.minimum(closest, np.linalg.norm(points - points[nxt], axis=1))
    return points[chosen]


def eigengap_k(eigenvalues: np.ndarray) -> int:
    """Cluster count at the largest gap among the top eigenvalues (descending)."""
    top = np.sort(eigenvalues)[::-1][: min(len(eigenvalues), EIGENGAP_CANDIDATES)]
    if top.size < 2:
        return 1
    return int(np.argmax(top[:-1] - top[1:])) + 1


def spectral_clustering(A: np.ndarray, k: Optional[int] = None, seed: int = 0) -> np.ndarray:
    """Normalized spectral clustering with k-means on unit-normalized eigenvector rows.

    Zero-degree nodes become singletons and count towards ``k``. Without
    ``k`` the cluster count follows the largest eigengap.
    """
    A = _check_affinity(A)
    n = A.shape[0]
    if k is not None and (k < 1 or k > n):
        raise ClusteringError(f"cannot form {k} clusters from {n} nodes", details={"k": k, "nodes": n})
    degree = A.sum(axis=1)
    active = np.flatnonzero(degree > 0)
    isolated = np.flatnonzero(degree <= 0)
    labels = np.empty(n, dtype=np.int64)
    labels[isolated] = np.arange(isolated.size)
    if active.size == 0:
        return labels

    scale = 1.0 / np.sqrt(degree[active])
    normalized = A[np.ix_(active, active)] * scale[:, None] * scale[None, :]
    eigenvalues, eigenvectors = eigh(normalized)
    if k is None:
        clusters = eigengap_k(eigenvalues)
    else:
        clusters = min(max(k - isolated.size, 1), active.size)
    embedding = eigenvectors[:, ::-1][:, :clusters]
    norms = np.linalg.norm(embedding, axis=1, keepdims=True)
    embedding = embedding / np.where(norms > 0, norms, 1.0)

    rng = np.random.default_rng(seed)
    kmeans = KMeans(
        n_clusters=clusters,
        init=_farthest_first(embedding, clusters, rng),
        n_init=1,
        max_iter=300,
        algorithm="lloyd",
        random_state=seed,
    ).fit(embedding)
    labels[active] = isolated.size + kmeans.labels_
    logger.debug("Spectral clustering: %d clusters over %d active nodes", clusters, active.size)
    return labels


def extract_groups(labels: Sequence[int], person_ids: Optional[Sequence[int]] = None) -> List[FrozenSet[int]]:
    """Clusters with at least two members, as sets of person ids (indices by default)."""
    ids = list(range(len(labels))) if person_ids is None else list(person_ids)
    members: Dict[int, List[int]] = {}
    for node, label in enumerate(labels):
        members.setdefault(int(label), []).append(ids[node])
    groups = [frozenset(group) for group in members.values() if len(group) >= 2]
    return sorted(groups, key=min)
