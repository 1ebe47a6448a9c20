"""End-to-end synthetic benchmark (slow; run with ``pytest -m slow``)."""

import numpy as np
import pytest

from group_transformer.core.pipeline import evaluate_scenes, train
from group_transformer.core.scene import drop_detections, perturb_boxes
from group_transformer.core.synthetic import derived_seeds, generate
from group_transformer.models import ArchConfig, GenConfig, InferConfig, SgdConfig, TrainConfig

pytestmark = pytest.mark.slow

ARCH = ArchConfig(
    app_dim=64,
    f_dim=64,
    z_dim=32,
    conv_channels=(16, 16, 32),
    model_dim=32,
    heads=4,
    ff_dim=32,
)
INFER = InferConfig.large_scale()


def _scenes(seed, count):
    return [generate(GenConfig(seed=s)) for s in derived_seeds(seed, count)]


def _config(arch):
    return TrainConfig(
        arch=arch,
        epochs=30,
        grad_accum_iters=10,
        sgd=SgdConfig(learning_rate=0.01, schedule=[(20, 0.2)]),
        infer=INFER,
        seed=0,
    )


@pytest.fixture(scope="module")
def held_out():
    return _scenes(2024, 10)


@pytest.fixture(scope="module")
def full_model():
    return train(_scenes(7, 50), _config(ARCH)).model


@pytest.fixture(scope="module")
def trajectory_only_model():
    return train(_scenes(7, 50), _config(ARCH.model_copy(update={"variant": "no_appearance"}))).model


def _f1(scenes, model):
    _, total = evaluate_scenes(scenes, model, INFER)
    return total.f1


def test_full_model_reaches_target_f1(full_model, held_out):
    assert _f1(held_out, full_model) >= 0.80


def test_appearance_helps_against_parallel_walkers(full_model, trajectory_only_model, held_out):
    assert GenConfig().parallel_singletons > 0 and GenConfig().parallel_groups > 0
    assert _f1(held_out, full_model) >= _f1(held_out, trajectory_only_model) + 0.03


NOISE_SEEDS = range(5)


@pytest.fixture(scope="module")
def robustness_scenes():
    return _scenes(4048, 20)


def _pooled_f1(scenes, model, perturb, level):
    """F1 over every scene perturbed under each noise seed, counts pooled."""
    perturbed = [perturb(scene, level, seed=seed) for seed in NOISE_SEEDS for scene in scenes]
    return _f1(perturbed, model)


def test_box_noise_degrades_monotonically(full_model, robustness_scenes):
    scores = [_pooled_f1(robustness_scenes, full_model, perturb_boxes, sigma) for sigma in (0.0, 0.1, 0.3)]
    assert scores[0] >= scores[1] >= scores[2]


def test_missing_detections_degrade_monotonically(full_model, robustness_scenes):
    scores = [_pooled_f1(robustness_scenes, full_model, drop_detections, mdr) for mdr in (0.0, 0.1, 0.2)]
    assert scores[0] >= scores[1] >= scores[2]


def test_training_loss_moving_average_never_rises():
    config = _config(ARCH).model_copy(update={"epochs": 200, "grad_accum_iters": 5})
    losses = np.array(train(_scenes(7, 5), config).epoch_losses)
    moving = np.convolve(losses, np.ones(20) / 20, mode="valid")
    assert np.all(np.diff(moving) <= 0.02 * moving[0])
    assert moving[-1] < moving[0]
