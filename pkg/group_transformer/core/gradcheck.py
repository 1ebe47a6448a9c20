"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

import logging
from typing import Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from ..models import ArchConfig, GradCheckResult
from . import tensor as T
from .edge_head import EdgeHead, edge_score
from .network import GroupTransformer, PersonBatch
from .occlusion import OcclusionEncoder, encode
from .pipeline import balanced_bce_loss
from .stt import SpatialBranch, TemporalBranch, spatial_branch, temporal_branch
from .tensor import BatchNormState, Tensor, no_grad, parameter

logger = logging.getLogger("group-transformer.gradcheck")

OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def grad_check(
    fn: Callable[..., Tensor],
    point: Sequence[Tensor],
    step: float = 1e-5,
    floor: float = 1e-8,
    samples: Optional[int] = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences of ``fn(*point)``.

    The relative error of an entry is |a - n| / max(|a|, |n|, floor). With
    ``samples`` only that many randomly chosen entries per tensor are probed.
    """
    for tensor in point:
        tensor.data = np.ascontiguousarray(tensor.data)
        tensor.grad = None
        tensor.requires_grad = True
    loss = fn(*point)
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in point]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for tensor, grad in zip(point, analytic):
            flat = tensor.data.reshape(-1)
            indices = np.arange(flat.size)
            if samples is not None and samples < flat.size:
                indices = np.sort(rng.choice(flat.size, size=samples, replace=False))
            for i in indices:
                original = flat[i]
                flat[i] = original + step
                upper = fn(*point).item()
                flat[i] = original - step
                lower = fn(*point).item()
                flat[i] = original
                numeric = (upper - lower) / (2 * step)
                a = grad.reshape(-1)[i]
                worst = max(worst, abs(a - numeric) / max(abs(a), abs(numeric), floor))
    for tensor in point:
        tensor.grad = None
    return worst


def _away_from_zero(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 1.0, size=shape)


def _weighted(rng: np.random.Generator, shape: tuple) -> np.ndarray:
    """Random loss weights so gradients are not all equal."""
    return rng.standard_normal(shape)


def op_checks(seed: int) -> Dict[str, float]:
    """Relative errors of every differentiable operation at a random point."""
    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}

    x, W, b = (parameter(rng.standard_normal(s)) for s in ((3, 4), (4, 2), (2,)))
    w = _weighted(rng, (3, 2))
    errors["linear"] = grad_check(lambda x, W, b: T.sum(T.mul(T.linear(x, W, b), w)), [x, W, b])

    x, K, b = (parameter(rng.standard_normal(s)) for s in ((2, 3, 5), (4, 3, 3), (4,)))
    w = _weighted(rng, (2, 4, 5))
    errors["conv1d_same"] = grad_check(lambda x, K, b: T.sum(T.mul(T.conv1d_same(x, K, b), w)), [x, K, b])

    x = parameter(rng.standard_normal((3, 2, 4)))
    gamma = parameter(rng.uniform(0.5, 1.5, 2))
    beta = parameter(rng.standard_normal(2))
    w = _weighted(rng, (3, 2, 4))
    state = BatchNormState(2)
    errors["batchnorm1d.train"] = grad_check(
        lambda x, g, b: T.sum(T.mul(T.batchnorm1d(x, g, b, "train", state), w)), [x, gamma, beta]
    )
    errors["batchnorm1d.eval"] = grad_check(
        lambda x, g, b: T.sum(T.mul(T.batchnorm1d(x, g, b, "eval", state), w)), [x, gamma, beta]
    )

    x = parameter(_away_from_zero(rng, (6,)))
    w = _weighted(rng, (6,))
    errors["relu"] = grad_check(lambda x: T.sum(T.mul(T.relu(x), w)), [x])
    x = parameter(rng.standard_normal(6))
    errors["sigmoid"] = grad_check(lambda x: T.sum(T.mul(T.sigmoid(x), w)), [x])
    errors["log_sigmoid"] = grad_check(lambda x: T.sum(T.mul(T.log_sigmoid(x), w)), [x])
    errors["absolute"] = grad_check(lambda x: T.sum(T.mul(T.absolute(x), w)), [parameter(_away_from_zero(rng, (6,)))])

    x = parameter(rng.standard_normal((2, 3, 4)))
    w = _weighted(rng, (2, 3, 4))
    errors["softmax_lastdim"] = grad_check(lambda x: T.sum(T.mul(T.softmax_lastdim(x), w)), [x])

    x = parameter(rng.standard_normal((3, 5)))
    gamma, beta = parameter(rng.uniform(0.5, 1.5, 5)), parameter(rng.standard_normal(5))
    w = _weighted(rng, (3, 5))
    errors["layer_norm"] = grad_check(lambda x, g, b: T.sum(T.mul(T.layer_norm(x, g, b), w)), [x, gamma, beta])

    F = parameter(rng.uniform(0.1, 1.0, (2, 4, 3)))
    w = _weighted(rng, (2, 4, 4))
    errors["cosine_similarity"] = grad_check(lambda F: T.sum(T.mul(T.cosine_similarity(F), w)), [F])

    a, c = parameter(rng.standard_normal((2, 3, 4))), parameter(rng.standard_normal((2, 4, 2)))
    w = _weighted(rng, (2, 3, 2))
    errors["matmul"] = grad_check(lambda a, c: T.sum(T.mul(T.matmul(a, c), w)), [a, c])

    a, c = parameter(rng.standard_normal((2, 3))), parameter(rng.standard_normal((2, 2)))
    w = _weighted(rng, (3, 4))
    errors["concat+transpose+take"] = grad_check(
        lambda a, c: T.sum(T.mul(T.transpose(T.take(T.concat([a, c], axis=1), [1, 0, 1], axis=0), (1, 0)), w)),
        [a, c],
    )

    x = parameter(rng.standard_normal((2, 3)))
    y = parameter(rng.uniform(0.5, 2.0, (2, 3)))
    errors["div"] = grad_check(lambda x, y: T.mean(T.div(x, y)), [x, y])

    scores = parameter(rng.standard_normal(10))
    labels = np.array([1, 1, 0, 0, 0, 0, 0, 0, 0, 0], dtype=float)
    errors["balanced_bce_loss"] = grad_check(lambda s: balanced_bce_loss(s, labels)[0], [scores])

    K = parameter(rng.standard_normal((4, 3, 3)))
    gamma, beta = parameter(rng.uniform(0.5, 1.5, 4)), parameter(rng.standard_normal(4))
    x = parameter(rng.standard_normal((2, 3, 4)))
    w = _weighted(rng, (2, 4, 4))
    bias = np.zeros(4)
    state = BatchNormState(4)
    errors["conv1d+batchnorm+relu"] = grad_check(
        lambda x, K, g, b: T.sum(T.mul(T.relu(T.batchnorm1d(T.conv1d_same(x, K, bias), g, b, "train", state)), w)),
        [x, K, gamma, beta],
    )
    return errors


def module_checks(seed: int) -> Dict[str, float]:
    """Occlusion encoder, both STT branches and the edge score at tiny widths."""
    rng = np.random.default_rng(seed)
    errors: Dict[str, float] = {}

    encoder = OcclusionEncoder.create(6, 4, 3, rng)
    X = Tensor(rng.standard_normal((4, 6)))
    vis = np.array([True, True, False, True])
    w = _weighted(rng, (4, 3))
    params = list(encoder.parameters().values())
    errors["occlusion.encode"] = grad_check(lambda *_: T.sum(T.mul(encode(X, vis, encoder), w)), params)

    arch = ArchConfig.tiny()
    branch = TemporalBranch.create("t", 5, arch.conv_channels, rng)
    x = parameter(rng.uniform(0.0, 1.0, (3, 5, 4)))
    w = _weighted(rng, (3, 8, 4))
    # conv biases before batchnorm have zero gradient and are left out
    checked = [x] + [p for name, p in branch.parameters().items() if not (".conv" in name and name.endswith(".b"))]
    errors["temporal_branch"] = grad_check(lambda *_: T.sum(T.mul(temporal_branch(x, branch, "train"), w)), checked)

    for residual in ("value", "canonical"):
        spatial = SpatialBranch.create("s", 4, 8, arch.model_copy(update={"residual": residual}), rng)
        z_app = parameter(rng.standard_normal((3, 4, 2)))
        z_traj = parameter(rng.standard_normal((3, 8, 2)))
        vis = np.array([[True, True], [True, False], [True, True]])
        w = _weighted(rng, (3, 8, 2))
        errors[f"spatial_branch.{residual}"] = grad_check(
            lambda *_: T.sum(T.mul(spatial_branch(z_app, z_traj, spatial, vis), w)),
            [z_app, z_traj, *spatial.parameters().values()],
        )

    head = EdgeHead.create(6, rng)
    head.classifier.b.data = rng.standard_normal(1)
    F = parameter(rng.uniform(0.0, 1.0, (6, 3)))
    covis = np.array([True, False, True])
    errors["edge_score"] = grad_check(
        lambda *_: edge_score(F, covis, head), [F, *head.parameters().values()]
    )
    return errors


def tiny_batch(rng: np.random.Generator, persons: int = 3, frames: int = 4, app_dim: int = 8) -> PersonBatch:
    """Random inputs with one missing detection."""
    centers = rng.uniform(0.2, 0.8, (persons, 2, frames))
    sizes = rng.uniform(0.05, 0.15, (persons, 2, frames))
    visibility = np.ones((persons, frames), dtype=bool)
    visibility[persons - 1, 0] = False
    trajectories = np.concatenate([centers, sizes, np.ones((persons, 1, frames))], axis=1)
    trajectories *= visibility[:, None, :]
    appearance = rng.standard_normal((persons, frames, app_dim)) * visibility[:, :, None]
    return PersonBatch(
        person_ids=tuple(range(persons)),
        window=(0, frames),
        trajectories=trajectories,
        appearance=appearance,
        visibility=visibility,
    )


def model_check(seed: int, arch: Optional[ArchConfig] = None, samples: Optional[int] = 4) -> float:
    """Balanced loss of the full tiny model against every parameter tensor.

    ``samples=None`` checks every entry of every tensor, conv biases included.
    """
    rng = np.random.default_rng(seed)
    arch = arch or ArchConfig.tiny()
    model = GroupTransformer(arch, seed=seed).train()
    model.head.classifier.b.data = rng.standard_normal(1)
    batch = tiny_batch(rng, app_dim=arch.app_dim)
    pairs = [(0, 1), (0, 2), (1, 2)]
    labels = np.array([1.0, 0.0, 0.0])
    params: Mapping[str, Tensor] = model.parameters()
    conv_biases = [p for name, p in params.items() if ".conv" in name and name.endswith(".b")]
    checked = [p for p in params.values() if not any(p is b for b in conv_biases)]

    def loss(*_):
        return balanced_bce_loss(model.score(batch, pairs), labels)[0]

    # summed roundoff of the full forward pass sits near 1e-10, hence the larger floor
    error = grad_check(loss, checked, step=1e-6, floor=1e-6, samples=samples, seed=seed)
    if samples is None:
        # batchnorm cancels a constant conv bias; the loss is flat along it at any step
        error = max(error, grad_check(loss, conv_biases, step=1e-3, floor=1e-6, seed=seed))
    return error


def run_suite(
    seeds: int = 10,
    model_seeds: Optional[int] = None,
    exhaustive: bool = False,
) -> List[GradCheckResult]:
    """Worst error per check over ``seeds`` random points.

    With ``exhaustive`` the full-model check covers every parameter entry
    instead of a random sample per tensor.
    """
    worst: Dict[str, float] = {}
    for seed in range(seeds):
        for checks in (op_checks(seed), module_checks(seed)):
            for name, error in checks.items():
                worst[name] = max(worst.get(name, 0.0), error)
    results = [
        GradCheckResult(name=name, error=error, tolerance=OP_TOLERANCE, passed=error < OP_TOLERANCE)
        for name, error in worst.items()
    ]
    samples = None if exhaustive else 4
    model_error = max(
        model_check(seed, samples=samples) for seed in range(seeds if model_seeds is None else model_seeds)
    )
    results.append(
        GradCheckResult(name="full_model", error=model_error, tolerance=MODEL_TOLERANCE, passed=model_error < MODEL_TOLERANCE)
    )
    failed = [r.name for r in results if not r.passed]
    if failed:
        logger.warning("Gradient checks failed: %s", ", ".join(failed))
    return results
