import json

import numpy as np
import pytest

from cnnmap.cli import main
from cnnmap.datasets import load_bundle, bundle_hash
from cnnmap.experiment import load_recipes, resolve_config
from cnnmap.weights import load_container

import fixtures

FAST = ["--epochs", "1", "--batch-size", "10"]


@pytest.fixture
def out_root(tmp_path, monkeypatch):
    monkeypatch.setenv("CNNMAP_OUTPUT_ROOT", str(tmp_path / "runs"))
    return tmp_path / "runs"


@pytest.fixture
def scene(out_root):
    assert main(["synth", "--frames", "12", "--out", "scene"]) == 0
    return out_root / "scene"


def _error(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_synth_is_deterministic(out_root, capsys):
    assert main(["synth", "--frames", "5", "--out", "a"]) == 0
    assert main(["synth", "--frames", "5", "--out", "b"]) == 0
    hashes = [line for line in capsys.readouterr().out.splitlines() if line.startswith("hash")]
    assert hashes[0] == hashes[1]
    assert bundle_hash(load_bundle(out_root / "a")) == bundle_hash(load_bundle(out_root / "b"))


def test_validate_tum(tmp_path, capsys):
    fixtures.write_tum(tmp_path / "seq", unmatched=False)
    assert main(["validate-dataset", str(tmp_path / "seq"), "--family", "tum"]) == 0
    assert "3 frames, 0 dropped" in capsys.readouterr().out


def test_validate_cambridge_splits(tmp_path, capsys):
    fixtures.write_cambridge(tmp_path / "Court")
    fixtures.write_cambridge(tmp_path / "Court", "dataset_test.txt")
    assert main(["validate-dataset", str(tmp_path / "Court"), "--family", "cambridge"]) == 0
    out = capsys.readouterr().out
    assert "Court/dataset_train [train]: 2 frames" in out
    assert "Court/dataset_test [test]: 2 frames" in out


def test_validate_corrupt_pose(tmp_path, capsys):
    seq = tmp_path / "seq-01"
    fixtures.write_7scenes_seq(seq)
    (seq / "frame-000001.pose.txt").write_text("1 0 0\nnot a matrix\n")
    assert main(["validate-dataset", str(seq), "--family", "7scenes"]) == 2
    err = _error(capsys)
    assert err["error"] == "ingestion" and "frame-000001" in err["message"]


def test_validate_missing_path(tmp_path, capsys):
    assert main(["validate-dataset", str(tmp_path / "nope"), "--family", "tum"]) == 2


def test_usage_errors(capsys):
    assert main(["bogus"]) == 1
    assert main(["train", "--recipe", "nope"]) == 1
    assert _error(capsys)["error"] == "usage"
    assert main(["train", "--recipe", "smoke", "--init-std", "he", "--lr", "-1"]) == 1


def test_train_outputs_and_replay(scene, out_root):
    assert main(["train", "--recipe", "smoke", "--data", str(scene), *FAST, "--out", "t1"]) == 0
    run = out_root / "t1"
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["status"] == "ok" and manifest["reported"] == "final"
    assert manifest["config"]["dataset"] == {"family": "bundle", "root": str(scene)}
    assert manifest["arch"]["param_count"] == 48391
    for name in ("best", "final"):
        assert (run / manifest["checkpoints"][name]["path"]).exists()
    assert len(json.loads((run / "history.json").read_text())["epochs"]) == 1
    assert (run / "reports" / "traj-03.json").exists()
    assert (run / "plot" / "traj-03" / "predicted.csv").exists()
    # replay from the manifest alone
    assert main(["train", "--config", str(run / "manifest.json"), "--out", "t2"]) == 0
    again = json.loads((out_root / "t2" / "manifest.json").read_text())
    assert again["checkpoints"]["final"]["sha256"] == manifest["checkpoints"]["final"]["sha256"]
    assert (out_root / "t2" / "history.json").read_bytes() == (run / "history.json").read_bytes()


def test_train_does_not_touch_input(scene, out_root):
    before = {p.name: p.read_bytes() for p in scene.iterdir()}
    assert main(["train", "--recipe", "smoke", "--data", str(scene), *FAST]) == 0
    assert {p.name: p.read_bytes() for p in scene.iterdir()} == before
    assert (out_root / "train-MINI-rgb-seed0" / "manifest.json").exists()


def test_divergence_exit_code(scene, out_root, capsys):
    code = main(["train", "--recipe", "smoke", "--data", str(scene), "--lr", "1", "--epochs", "40",
                 "--batch-size", "10", "--out", "div"])
    assert code == 3
    assert "diverged" in _error(capsys)["message"]
    manifest = json.loads((out_root / "div" / "manifest.json").read_text())
    assert manifest["status"] == "diverged"
    assert (out_root / "div" / "checkpoints" / "last-good.manifest").exists()


def test_finetune_and_eval(scene, out_root, capsys):
    assert main(["train", "--recipe", "smoke", "--data", str(scene), *FAST, "--out", "base"]) == 0
    weights = out_root / "base" / "checkpoints" / "final.manifest"
    assert main(["finetune", "--recipe", "smoke", "--data", str(scene), *FAST, "--weights", str(weights),
                 "--out", "ft"]) == 0
    ft = json.loads((out_root / "ft" / "manifest.json").read_text())
    assert ft["config"]["pretrained"] == str(weights)
    prov = load_container(out_root / "ft" / "checkpoints" / "final.manifest").meta["provenance"]
    assert prov["copied"] == ["conv1", "conv2", "conv3", "fc4", "fc5"]
    assert main(["finetune", "--recipe", "smoke", "--data", str(scene), *FAST]) == 1
    capsys.readouterr()
    assert main(["eval", "--weights", str(weights), "--data", str(scene), "--out", "ev"]) == 0
    ev = json.loads((out_root / "ev" / "reports" / "traj-03.json").read_text())
    assert ev["meta"]["dataset"] == "traj-03" and ev["meta"]["weights"] == str(weights)
    assert len(ev["frames"]) == 12
    assert main(["eval", "--weights", str(weights), "--data", str(scene), "--modality", "depth"]) == 4


def test_sweep_and_curriculum_report(scene, out_root):
    assert main(["sweep", "--recipe", "smoke", "--data", str(scene), "--batch-size", "10",
                 "--combos", "2", "--sweep-epochs", "1", "--out", "sw"]) == 0
    res = json.loads((out_root / "sw" / "sweep.json").read_text())
    assert len(res["entries"]) == 2
    assert main(["curriculum", "--recipe", "smoke", "--data", str(scene), *FAST, "--out", "cu"]) == 0
    assert len(list((out_root / "cu" / "stages").glob("*.json"))) == 3
    assert main(["report", str(out_root / "cu"), "--out", "rep"]) == 0
    curve = (out_root / "rep" / "curve.csv").read_text().splitlines()
    assert curve[0] == "n_trajectories,position_mean,angle_mean,param_count"
    assert [line.split(",")[0] for line in curve[1:]] == ["1", "2", "3"]
    table = (out_root / "rep" / "report.md").read_text()
    assert "| *PoseNet* | NA |" in table


def test_convert_weights(tmp_path, capsys):
    arrays = {"conv1.weight": np.ones((2, 2, 3, 4), np.float32), "conv1.bias": np.zeros(4, np.float32)}
    np.savez(tmp_path / "w.npz", **arrays)
    assert main(["convert-weights", str(tmp_path / "w.npz"), "--out", str(tmp_path / "w.manifest"),
                 "--channel-means", "0.4", "0.5", "0.6"]) == 0
    c = load_container(tmp_path / "w.manifest")
    np.testing.assert_array_equal(c.arrays["conv1.weight"], arrays["conv1.weight"])
    assert c.channel_means == [0.4, 0.5, 0.6]


def test_recipes_resolve():
    recipes = load_recipes()
    assert {"smoke", "smoke-curriculum", "full", "full-tum"} <= set(recipes)
    for name in recipes:
        cfg = resolve_config(name)
        assert cfg.arch_spec().in_channels == cfg.input_config().modality.channels
    full = resolve_config("full")
    assert (full.hp.batch_size, full.hp.weight_decay, full.hp.beta) == (30, 0.5, 250.0)
    assert full.sweep_grid().lr_range == (1e-10, 1e-06)
    flags = resolve_config("smoke", overrides={"hp": {"epochs": 3, "seed": None}})
    assert flags.hp.epochs == 3 and flags.hp.seed == 0
