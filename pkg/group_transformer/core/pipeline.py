"""Training and inference over relation graphs of person pairs.

Training samples a window and a handful of ground-truth groups per
iteration, keeps every intra-group pair and the inter-group pairs that come
close, and minimises a balanced binary cross-entropy. Inference scores the
pairs that survive a distance and a temporal-overlap filter, builds a
symmetric affinity matrix and clusters it into groups.
"""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from ..models import InferConfig, MatchResult, TrainConfig, TrainRecord
from . import tensor as T
from .clustering import extract_groups, label_propagation, spectral_clustering
from .config import get_settings
from .edge_head import Edge, score_pairs
from .errors import NotVisibleError, ValidationFailure
from .evaluation import aggregate, score
from .network import GroupTransformer, PersonBatch
from .optim import sgd_step, zero_grad
from .scene import Scene, TrackedPerson, Window, sample_window
from .tensor import Tensor, no_grad

logger = logging.getLogger("group-transformer.pipeline")

SCORE_CHUNK = 256


# -- pair geometry ------------------------------------------------------------


def _frames(person: TrackedPerson, window: Optional[Window]) -> set[int]:
    if window is None:
        return set(person.boxes)
    return {t for t in person.boxes if window[0] <= t < window[1]}


def covisible_frames(u: TrackedPerson, v: TrackedPerson, window: Optional[Window] = None) -> List[int]:
    return sorted(_frames(u, window) & _frames(v, window))


def min_trajectory_distance(u: TrackedPerson, v: TrackedPerson, window: Optional[Window] = None) -> float:
    """Smallest Euclidean distance between box centers over co-visible frames."""
    frames = covisible_frames(u, v, window)
    if not frames:
        raise NotVisibleError(
            f"persons {u.id} and {v.id} never co-appear",
            details={"persons": [u.id, v.id]},
        )
    cu = np.array([u.boxes[t].center for t in frames])
    cv = np.array([v.boxes[t].center for t in frames])
    return float(np.min(np.linalg.norm(cu - cv, axis=1)))


def temporal_iou(u: TrackedPerson, v: TrackedPerson, window: Optional[Window] = None) -> float:
    fu, fv = _frames(u, window), _frames(v, window)
    union = fu | fv
    return len(fu & fv) / len(union) if union else 0.0


# -- training -----------------------------------------------------------------


def sample_groups(scene: Scene, count: int, rng: np.random.Generator) -> List[int]:
    available = len(scene.groups)
    if available < count:
        logger.warning("Scene has %d groups, fewer than the %d requested; using all of them", available, count)
    picked = rng.choice(available, size=min(count, available), replace=False)
    return sorted(int(i) for i in picked)


def build_training_edges(
    scene: Scene,
    group_ids: Sequence[int],
    delta_train: float,
    window: Optional[Window] = None,
) -> Tuple[List[int], List[Edge]]:
    """Persons of the sampled groups visible in ``window`` and their labelled edges.

    Intra-group pairs are always kept when they share a frame; inter-group
    pairs are kept only when they come within ``delta_train`` of each other.
    """
    owner: Dict[int, int] = {}
    for index in group_ids:
        if not 0 <= index < len(scene.groups):
            raise ValidationFailure(f"group index {index} out of range", code="invalid_group")
        for member in scene.groups[index]:
            owner[member] = index
    persons = sorted(pid for pid in owner if _frames(scene.person(pid), window))
    edges: List[Edge] = []
    dropped_positives = 0
    for a, b in itertools.combinations(persons, 2):
        pa, pb = scene.person(a), scene.person(b)
        positive = owner[a] == owner[b]
        if not covisible_frames(pa, pb, window):
            dropped_positives += positive
            continue
        if positive or min_trajectory_distance(pa, pb, window) <= delta_train:
            edges.append(Edge(a, b, label=int(positive)))
    if dropped_positives:
        logger.info("Dropped %d positive edges that never co-appear in the window", dropped_positives)
    return persons, edges


def balance_coefficient(labels: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size == 0:
        raise ValidationFailure("balanced loss needs at least one edge", code="empty_batch")
    return float(labels.mean())


def balanced_bce_loss(scores: Tensor, labels: np.ndarray) -> Tuple[Tensor, float]:
    """-sum[(1-lam) y log s(c) + lam (1-y) log(1-s(c))] with lam the positive fraction."""
    labels = np.asarray(labels, dtype=np.float64)
    lam = balance_coefficient(labels)
    if lam in (0.0, 1.0):
        logger.debug("Edge batch is all %s; one loss term vanishes", "positive" if lam else "negative")
    positive = T.mul(T.log_sigmoid(scores), (1.0 - lam) * labels)
    negative = T.mul(T.log_sigmoid(T.neg(scores)), lam * (1.0 - labels))
    return T.neg(T.sum(T.add(positive, negative))), lam


@dataclass
class TrainStep:
    loss: float
    balance: float
    edges: int


def training_step(model: GroupTransformer, batch: PersonBatch, edges: Sequence[Edge]) -> TrainStep:
    """Forward, loss and backward for one batch; gradients accumulate on the parameters."""
    logits = model.score(batch, [(e.u, e.v) for e in edges])
    loss, lam = balanced_bce_loss(logits, np.array([e.label for e in edges]))
    loss.backward()
    return TrainStep(loss=loss.item(), balance=lam, edges=len(edges))


@dataclass
class TrainResult:
    model: GroupTransformer
    history: List[TrainRecord] = field(default_factory=list)

    @property
    def epoch_losses(self) -> List[float]:
        by_epoch: Dict[int, List[float]] = {}
        for record in self.history:
            by_epoch.setdefault(record.epoch, []).append(record.loss)
        return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


def train(scenes: Sequence[Scene], config: TrainConfig, seed: Optional[int] = None) -> TrainResult:
    """Fit a fresh model; deterministic for a given seed."""
    if not scenes or not any(scene.groups for scene in scenes):
        raise ValidationFailure("training needs at least one scene with a group", code="no_training_data")
    seed = config.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    model = GroupTransformer(config.arch, seed=seed).train()
    params = model.parameters()
    zero_grad(params)
    result = TrainResult(model=model)
    iteration, pending = 0, 0
    for epoch in range(config.epochs):
        order = np.concatenate([rng.permutation(len(scenes)) for _ in range(config.iterations_per_scene)])
        for scene_index in order:
            scene = scenes[int(scene_index)]
            iteration += 1
            if not scene.groups:
                logger.info("Iteration %d: scene %d has no groups, skipped", iteration, scene_index)
                continue
            window = sample_window(scene, min(config.window, scene.frame_count), rng)
            group_ids = sample_groups(scene, config.groups_per_iter, rng)
            persons, edges = build_training_edges(scene, group_ids, config.delta_train, window)
            if not edges:
                logger.info("Iteration %d: no valid edges in scene %d window %s, skipped", iteration, scene_index, window)
                continue
            batch = PersonBatch.from_scene(scene, persons, window, with_appearance=config.arch.uses_appearance)
            step = training_step(model, batch, edges)
            pending += 1
            if pending == config.grad_accum_iters:
                sgd_step(params, config.sgd, epoch)
                pending = 0
            result.history.append(
                TrainRecord(
                    epoch=epoch,
                    iteration=iteration,
                    scene=int(scene_index),
                    loss=step.loss,
                    balance=step.balance,
                    edges=step.edges,
                    learning_rate=config.sgd.lr_at(epoch),
                )
            )
        if result.history and result.history[-1].epoch == epoch:
            logger.info("Epoch %d: mean loss %.4f (lr %g)", epoch, result.epoch_losses[-1], config.sgd.lr_at(epoch))
    if pending:
        sgd_step(params, config.sgd, config.epochs - 1)
    return result


# -- inference ----------------------------------------------------------------


@dataclass(frozen=True)
class AffinityMatrix:
    """Symmetric sigmoid scores over ``person_ids``; filtered pairs are 0."""

    person_ids: Tuple[int, ...]
    matrix: np.ndarray

    def __post_init__(self) -> None:
        n = len(self.person_ids)
        if self.matrix.shape != (n, n):
            raise ValidationFailure(f"affinity shape {self.matrix.shape} does not match {n} persons")

    def value(self, u: int, v: int) -> float:
        index = {pid: i for i, pid in enumerate(self.person_ids)}
        return float(self.matrix[index[u], index[v]])


def build_inference_edges(scene: Scene, config: InferConfig) -> List[Edge]:
    edges = []
    for pu, pv in itertools.combinations(scene.persons, 2):
        if not covisible_frames(pu, pv):
            continue
        if temporal_iou(pu, pv) < config.gamma:
            continue
        if min_trajectory_distance(pu, pv) > config.delta_test:
            continue
        edges.append(Edge.between(pu.id, pv.id))
    return sorted(edges, key=lambda e: (e.u, e.v))


def infer_affinity(
    scene: Scene,
    model: GroupTransformer,
    config: InferConfig,
    threads: Optional[int] = None,
) -> AffinityMatrix:
    """Score retained edges over the whole scene with the model in eval mode."""
    person_ids = tuple(scene.person_ids)
    n = len(person_ids)
    matrix = np.zeros((n, n))
    edges = build_inference_edges(scene, config)
    if not edges:
        return AffinityMatrix(person_ids, matrix)
    model.eval()
    batch = PersonBatch.from_scene(scene, person_ids, with_appearance=model.arch.uses_appearance)
    index = batch.rows()
    rows_u = np.array([index[e.u] for e in edges])
    rows_v = np.array([index[e.v] for e in edges])
    with no_grad():
        Z_all = model.individual_features(batch)

    def score_chunk(start: int) -> np.ndarray:
        stop = start + SCORE_CHUNK
        u, v = rows_u[start:stop], rows_v[start:stop]
        with no_grad():
            logits = score_pairs(Z_all, u, v, batch.covisibility(u, v), model.head)
        return logits.data

    starts = list(range(0, len(edges), SCORE_CHUNK))
    workers = max(1, threads or get_settings().threads)
    with ThreadPoolExecutor(max_workers=min(workers, len(starts))) as pool:
        logits = np.concatenate(list(pool.map(score_chunk, starts)))
    probs = expit(logits)
    matrix[rows_u, rows_v] = probs
    matrix[rows_v, rows_u] = probs
    logger.debug("Scored %d of %d pairs for %d persons", len(edges), n * (n - 1) // 2, n)
    return AffinityMatrix(person_ids, matrix)


def cluster_affinity(affinity: AffinityMatrix, config: InferConfig) -> List[FrozenSet[int]]:
    if len(affinity.person_ids) == 0:
        return []
    if config.clustering == "spectral":
        k = config.n_clusters
        if k is not None and k > len(affinity.person_ids):
            logger.warning("n_clusters=%d exceeds %d persons; clamping", k, len(affinity.person_ids))
            k = len(affinity.person_ids)
        labels = spectral_clustering(affinity.matrix, k=k, seed=config.seed)
    else:
        labels = label_propagation(affinity.matrix, max_iters=config.max_iters, seed=config.seed)
    return extract_groups(labels, affinity.person_ids)


def predict_groups(scene: Scene, model: GroupTransformer, config: InferConfig) -> List[FrozenSet[int]]:
    return cluster_affinity(infer_affinity(scene, model, config), config)


def evaluate_scenes(
    scenes: Sequence[Scene],
    model: GroupTransformer,
    config: InferConfig,
) -> Tuple[List[MatchResult], MatchResult]:
    """Per-scene half-metric results and their micro-averaged aggregate."""
    results = [score(predict_groups(scene, model, config), list(scene.groups)) for scene in scenes]
    return results, aggregate(results)
