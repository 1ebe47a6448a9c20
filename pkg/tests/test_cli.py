import numpy as np
import pytest

from group_transformer import __version__
from group_transformer.__main__ import run
from group_transformer.core.network import GroupTransformer
from group_transformer.core.scene import load_scene, read_groups

GEN_CONFIG = "n_groups=3\nn_singletons=3\nparallel_singletons=1\nframe_count=8\napp_dim=16\n"
TRAIN_CONFIG = """\
epochs=1
window=6
groups_per_iter=2
grad_accum_iters=1
arch.f_dim=4
arch.z_dim=4
arch.conv_channels=4,4,8
arch.model_dim=8
arch.heads=2
arch.ff_dim=8
"""


@pytest.fixture
def corpus(tmp_path):
    config = tmp_path / "gen.cfg"
    config.write_text(GEN_CONFIG)
    assert run(["gen", "--config", str(config), "--out", str(tmp_path / "data"), "--scenes", "2", "--seed", "3"]) == 0
    return tmp_path / "data"


@pytest.fixture
def checkpoint(tmp_path, corpus):
    config = tmp_path / "train.cfg"
    config.write_text(TRAIN_CONFIG)
    out = tmp_path / "model.gtck"
    args = ["train", "--scenes", str(corpus / "manifest.tsv"), "--config", str(config), "--out", str(out), "--seed", "1"]
    assert run(args) == 0
    return out


def test_version(capsys):
    assert run(["--version"]) == 0
    assert __version__ in capsys.readouterr().out


def test_unknown_flag_is_a_usage_error():
    assert run(["eval", "--bogus"]) == 1


def test_gen_writes_manifest_and_files(corpus):
    lines = (corpus / "manifest.tsv").read_text().splitlines()
    assert lines == ["scene_000.json\tscene_000.gtft", "scene_001.json\tscene_001.gtft"]
    scene = load_scene(corpus / "scene_000.json", corpus / "scene_000.gtft")
    assert len(scene.groups) == 3


def test_gen_rejects_bad_config(tmp_path, capsys):
    config = tmp_path / "gen.cfg"
    config.write_text("n_group=3\n")
    assert run(["gen", "--config", str(config), "--out", str(tmp_path / "data")]) == 1
    err = capsys.readouterr().err
    assert "Error (config_invalid):" in err
    assert "n_group: unknown key" in err


def test_scene_errors_report_their_code(tmp_path, capsys):
    scene = tmp_path / "scene.json"
    scene.write_text("{not json")
    assert run(["eval", "--pred", str(scene), "--gt", str(scene)]) == 1
    assert "Error (scene_parse_error):" in capsys.readouterr().err


def test_train_writes_loadable_checkpoint(checkpoint):
    model = GroupTransformer.load(checkpoint)
    assert model.arch.app_dim == 16
    assert model.arch.model_dim == 8
    assert model.buffers()


def test_train_is_reproducible(tmp_path, corpus, checkpoint):
    again = tmp_path / "again.gtck"
    args = ["train", "--scenes", str(corpus / "manifest.tsv"), "--config", str(tmp_path / "train.cfg"), "--out", str(again), "--seed", "1"]
    assert run(args) == 0
    assert again.read_bytes() == checkpoint.read_bytes()


def test_infer_and_eval(tmp_path, corpus, checkpoint, capsys):
    scene, features = corpus / "scene_000.json", corpus / "scene_000.gtft"
    groups = tmp_path / "pred.txt"
    affinity = tmp_path / "affinity.npy"
    args = ["infer", "--checkpoint", str(checkpoint), "--scene", str(scene), "--features", str(features), "--out", str(groups)]
    assert run(args + ["--affinity", str(affinity)]) == 0
    predicted = read_groups(groups)
    assert all(len(g) >= 2 for g in predicted)
    matrix = np.load(affinity)
    assert np.array_equal(matrix, matrix.T)

    repeat = tmp_path / "pred2.txt"
    assert run(args[:-1] + [str(repeat)]) == 0
    assert repeat.read_bytes() == groups.read_bytes()

    capsys.readouterr()
    assert run(["eval", "--pred", str(groups), "--gt", str(scene)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("scene=pred P=")
    assert "aggregate P=" in out


def test_eval_identical_files_is_perfect(tmp_path, capsys):
    groups = tmp_path / "groups.txt"
    groups.write_text("1 2 3\n4 5\n")
    assert run(["eval", "--pred", str(groups), "--gt", str(groups)]) == 0
    out = capsys.readouterr().out
    assert "scene=groups P=1.0000 R=1.0000 F1=1.0000" in out
    assert "aggregate P=1.0000 R=1.0000 F1=1.0000" in out


def test_eval_missing_file_is_an_io_error(tmp_path):
    groups = tmp_path / "groups.txt"
    groups.write_text("1 2\n")
    assert run(["eval", "--pred", str(groups), "--gt", str(tmp_path / "missing.txt")]) == 2


def test_perturb_zero_sigma_keeps_scene(tmp_path, corpus):
    out = tmp_path / "same.json"
    args = ["perturb", "--scene", str(corpus / "scene_000.json"), "--sigma", "0", "--seed", "4", "--out", str(out)]
    assert run(args) == 0
    assert out.read_bytes() == (corpus / "scene_000.json").read_bytes()


def test_perturb_with_features(tmp_path, corpus):
    out, features_out = tmp_path / "noisy.json", tmp_path / "noisy.gtft"
    args = [
        "perturb",
        "--scene", str(corpus / "scene_000.json"),
        "--features", str(corpus / "scene_000.gtft"),
        "--features-out", str(features_out),
        "--sigma", "0.1",
        "--mdr", "0.2",
        "--seed", "4",
        "--out", str(out),
    ]
    assert run(args) == 0
    assert load_scene(out, features_out).has_features


def test_perturb_rejects_rate_of_one(tmp_path, corpus):
    args = ["perturb", "--scene", str(corpus / "scene_000.json"), "--mdr", "1.0", "--out", str(tmp_path / "x.json")]
    assert run(args) == 1


def test_gradcheck_passes(capsys):
    assert run(["gradcheck", "--seeds", "1"]) == 0
    assert "All" in capsys.readouterr().out


def test_gradcheck_exhaustive_passes(capsys):
    assert run(["gradcheck", "--seeds", "1", "--exhaustive"]) == 0
    assert "All" in capsys.readouterr().out
