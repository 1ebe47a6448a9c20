import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from group_transformer.core.network import GroupTransformer, PersonBatch  # noqa: E402
from group_transformer.core.scene import BoundingBox, Scene, TrackedPerson  # noqa: E402
from group_transformer.core.synthetic import generate  # noqa: E402
from group_transformer.models import ArchConfig, GenConfig  # noqa: E402


@pytest.fixture
def tiny_arch() -> ArchConfig:
    return ArchConfig.tiny(app_dim=16)


@pytest.fixture
def small_gen_config() -> GenConfig:
    return GenConfig(
        n_groups=3,
        n_singletons=3,
        parallel_singletons=1,
        frame_count=8,
        app_dim=16,
        seed=7,
    )


@pytest.fixture
def small_scene(small_gen_config) -> Scene:
    return generate(small_gen_config)


def make_person(person_id: int, centers: dict, size: float = 0.02, appearance_dim: int = 0) -> TrackedPerson:
    """Square boxes of side ``2 * size`` around the given {frame: (cx, cy)} centers."""
    boxes = {t: BoundingBox(cx - size, cy - size, cx + size, cy + size) for t, (cx, cy) in centers.items()}
    appearance = None
    if appearance_dim:
        rng = np.random.default_rng(person_id)
        appearance = rng.standard_normal((len(boxes), appearance_dim))
    return TrackedPerson(id=person_id, boxes=boxes, appearance=appearance)


def warm_up(model: GroupTransformer, scene: Scene) -> GroupTransformer:
    """One train-mode forward so batchnorm running statistics exist."""
    model.train()
    model.individual_features(PersonBatch.from_scene(scene, scene.person_ids, with_appearance=model.arch.uses_appearance))
    return model.eval()
