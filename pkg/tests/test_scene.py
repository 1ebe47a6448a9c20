import json

import numpy as np
import pytest

from conftest import make_person
from group_transformer.core.errors import FeatureFormatError, SceneFormatError, SceneValidationError, ValidationFailure
from group_transformer.core.scene import (
    BoundingBox,
    Scene,
    appearance_window,
    attach_features,
    build_trajectory_features,
    drop_detections,
    load_scene,
    perturb_boxes,
    read_features,
    read_groups,
    sample_window,
    save_scene,
    scene_from_dict,
    validate_scene,
    write_features,
    write_groups,
)


def _payload(**overrides):
    payload = {
        "frame_count": 3,
        "app_dim": 2,
        "persons": [
            {"id": 1, "frames": [{"t": 0, "box": [0.1, 0.1, 0.2, 0.3]}, {"t": 2, "box": [0.1, 0.1, 0.2, 0.3]}]},
            {"id": 2, "frames": [{"t": 1, "box": [0.5, 0.5, 0.6, 0.7]}]},
        ],
        "groups": [[1, 2]],
    }
    payload.update(overrides)
    return payload


def test_bounding_box_rejects_inverted_corners():
    with pytest.raises(SceneValidationError):
        BoundingBox(0.3, 0.1, 0.2, 0.4)
    with pytest.raises(SceneValidationError):
        BoundingBox(0.1, 0.1, 0.2, 1.2)


def test_scene_from_dict_builds_tracks():
    scene = scene_from_dict(_payload())
    assert scene.person_ids == [1, 2]
    assert scene.person(1).frames == (0, 2)
    assert scene.person(1).boxes[2].center == pytest.approx((0.15, 0.2))
    assert scene.groups == (frozenset({1, 2}),)
    assert not scene.has_features


def test_scene_rejects_unknown_group_member():
    with pytest.raises(SceneValidationError, match="unknown person 9"):
        scene_from_dict(_payload(groups=[[1, 9]]))


def test_scene_rejects_person_in_two_groups():
    payload = _payload()
    payload["persons"].append({"id": 3, "frames": [{"t": 0, "box": [0.7, 0.1, 0.8, 0.3]}]})
    payload["groups"] = [[1, 2], [2, 3]]
    with pytest.raises(SceneValidationError, match="person 2 belongs to groups"):
        scene_from_dict(payload)


def test_scene_rejects_frame_outside_range():
    payload = _payload()
    payload["persons"][1]["frames"][0]["t"] = 3
    with pytest.raises(SceneValidationError, match="outside"):
        scene_from_dict(payload)


def test_scene_rejects_unknown_field():
    with pytest.raises(SceneFormatError):
        scene_from_dict(_payload(camera="front"))


def test_load_scene_reports_json_line(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text('{\n "frame_count": 3,\n "persons": [\n')
    with pytest.raises(SceneFormatError) as excinfo:
        load_scene(path)
    assert excinfo.value.line is not None
    assert str(path) in excinfo.value.message


def test_scene_file_and_features_reload(tmp_path, small_scene):
    scene_path = save_scene(small_scene, tmp_path / "scene.json")
    feature_path = write_features(small_scene, tmp_path / "scene.gtft")
    loaded = load_scene(scene_path, features=feature_path)
    assert loaded.person_ids == small_scene.person_ids
    assert loaded.groups == small_scene.groups
    for original, restored in zip(small_scene.persons, loaded.persons):
        assert restored.frames == original.frames
        np.testing.assert_array_equal(restored.appearance, original.appearance)


def test_feature_file_layout(tmp_path):
    person = make_person(4, {0: (0.5, 0.5), 2: (0.5, 0.5)}, appearance_dim=3)
    scene = Scene(frame_count=3, app_dim=3, persons=(person,), groups=())
    path = write_features(scene, tmp_path / "f.gtft")
    blob = path.read_bytes()
    assert blob[:4] == b"GTFT"
    assert len(blob) == 12 + 12 + 2 * (4 + 3 * 4)
    table = read_features(path)
    assert list(table[4][0]) == [0, 2]


def test_feature_file_rejects_bad_magic_and_trailing_bytes(tmp_path, small_scene):
    path = write_features(small_scene, tmp_path / "f.gtft")
    blob = path.read_bytes()
    (tmp_path / "magic.gtft").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FeatureFormatError, match="magic"):
        read_features(tmp_path / "magic.gtft")
    (tmp_path / "tail.gtft").write_bytes(blob + b"\x00")
    with pytest.raises(FeatureFormatError, match="trailing"):
        read_features(tmp_path / "tail.gtft")
    (tmp_path / "short.gtft").write_bytes(blob[:-3])
    with pytest.raises(FeatureFormatError, match="truncated"):
        read_features(tmp_path / "short.gtft")


def test_attach_features_requires_matching_frames(small_scene):
    person = small_scene.persons[0]
    table = {p.id: (np.array(p.frames), p.appearance) for p in small_scene.persons}
    table[person.id] = (np.array(person.frames[:-1]), person.appearance[:-1])
    with pytest.raises(FeatureFormatError, match=f"person {person.id}"):
        attach_features(small_scene, table)


def test_trajectory_features_mark_invisible_frames():
    person = make_person(1, {1: (0.4, 0.6), 3: (0.5, 0.6)}, size=0.05)
    feature = build_trajectory_features(person, (0, 4))
    assert feature.values.shape == (5, 4)
    np.testing.assert_array_equal(feature.visible, [False, True, False, True])
    np.testing.assert_allclose(feature.values[:, 1], [0.4, 0.6, 0.1, 0.1, 1.0])
    np.testing.assert_array_equal(feature.values[:, 0], np.zeros(5))
    assert not feature.empty
    assert build_trajectory_features(person, (4, 6)).empty


def test_trajectory_features_reject_empty_window():
    person = make_person(1, {0: (0.5, 0.5)})
    with pytest.raises(ValidationFailure):
        build_trajectory_features(person, (2, 2))


def test_appearance_window_zero_at_invisible_frames():
    person = make_person(1, {1: (0.5, 0.5), 2: (0.5, 0.5)}, appearance_dim=4)
    rows = appearance_window(person, (0, 3), 4)
    np.testing.assert_array_equal(rows[0], np.zeros(4))
    np.testing.assert_array_equal(rows[2], person.appearance[1])


def test_sample_window_stays_inside_scene(small_scene):
    rng = np.random.default_rng(0)
    for _ in range(20):
        t0, t1 = sample_window(small_scene, 5, rng)
        assert t1 - t0 == 5
        assert 0 <= t0 and t1 <= small_scene.frame_count
    with pytest.raises(ValidationFailure):
        sample_window(small_scene, small_scene.frame_count + 1, rng)


def test_sample_window_reaches_every_start():
    scene = Scene(frame_count=16, app_dim=1, persons=(make_person(1, {0: (0.5, 0.5)}),), groups=())
    rng = np.random.default_rng(3)
    starts = [sample_window(scene, 5, rng)[0] for _ in range(10_000)]
    counts = np.bincount(starts, minlength=12)
    assert len(counts) == 12
    assert counts.min() > 0


def test_perturb_noise_variance_matches_sigma():
    # boxes of side 0.04 centered in the frame; sigma=0.1 never reorders or clips corners
    persons = tuple(make_person(i, {t: (0.5, 0.5) for t in range(100)}) for i in range(1000))
    scene = Scene(frame_count=100, app_dim=1, persons=persons, groups=())
    noisy = perturb_boxes(scene, 0.1, seed=4)
    before = np.array([p.boxes[t].as_list() for p in scene.persons for t in p.frames])
    after = np.array([p.boxes[t].as_list() for p in noisy.persons for t in p.frames])
    relative = (after - before) / 0.04
    np.testing.assert_allclose(relative.mean(axis=0), 0.0, atol=0.002)
    np.testing.assert_allclose(relative.var(axis=0), 0.01, rtol=0.05)


def test_perturb_same_seed_same_boxes(small_scene):
    assert perturb_boxes(small_scene, 0.3, seed=5) == perturb_boxes(small_scene, 0.3, seed=5)
    assert perturb_boxes(small_scene, 0.3, seed=5) != perturb_boxes(small_scene, 0.3, seed=6)


def test_perturb_zero_sigma_is_identity(small_scene):
    assert perturb_boxes(small_scene, 0.0, seed=1) == small_scene


def test_perturb_keeps_boxes_valid(small_scene):
    noisy = perturb_boxes(small_scene, 5.0, seed=3)
    validate_scene(noisy)
    assert noisy != small_scene


def test_drop_detections_zero_rate_is_identity(small_scene):
    assert drop_detections(small_scene, 0.0, seed=1) == small_scene


def test_drop_detections_rate_matches_expectation():
    persons = tuple(make_person(i, {t: (0.5, 0.5) for t in range(100)}) for i in range(1000))
    scene = Scene(frame_count=100, app_dim=1, persons=persons, groups=())
    dropped = drop_detections(scene, 0.1, seed=0)
    kept = sum(len(p.boxes) for p in dropped.persons)
    assert abs(1 - kept / 100000 - 0.1) < 0.005


def test_drop_detections_removes_shrunken_groups():
    persons = (
        make_person(1, {0: (0.2, 0.5)}),
        make_person(2, {0: (0.3, 0.5), 1: (0.3, 0.5)}),
    )
    scene = Scene(frame_count=2, app_dim=1, persons=persons, groups=(frozenset({1, 2}),))
    for seed in range(50):
        dropped = drop_detections(scene, 0.5, seed=seed)
        present = set(dropped.person_ids)
        assert all(group <= present and len(group) >= 2 for group in dropped.groups)


def test_drop_detections_rejects_rate_of_one(small_scene):
    with pytest.raises(ValidationFailure):
        drop_detections(small_scene, 1.0, seed=0)


def test_groups_file_is_sorted(tmp_path):
    path = write_groups([frozenset({9, 4}), frozenset({3, 1, 2})], tmp_path / "groups.txt")
    assert path.read_text() == "1 2 3\n4 9\n"
    assert read_groups(path) == [frozenset({1, 2, 3}), frozenset({4, 9})]


def test_read_groups_from_scene_json(tmp_path):
    path = tmp_path / "scene.json"
    path.write_text(json.dumps(_payload()))
    assert read_groups(path) == [frozenset({1, 2})]


def test_read_groups_rejects_non_integer(tmp_path):
    path = tmp_path / "groups.txt"
    path.write_text("1 2\n3 x\n")
    with pytest.raises(SceneFormatError) as excinfo:
        read_groups(path)
    assert excinfo.value.line == 2
