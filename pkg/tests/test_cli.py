import json

import numpy as np
import pytest

from skinfit.cli import main
from skinfit.fileio import load_cloud, load_mesh, save_cloud

TINY = """
batch_size = 2
points = 64
selfsup_points = 64
pretrain_steps = 3
steps = 3
seg_holdout = 2
encoder_widths = [8, 16]
feature = 8
deformer_hidden = [16, 8]
seg_widths = [8, 16]
record_time = false
"""


@pytest.fixture(autouse=True)
def one_thread(monkeypatch):
    monkeypatch.setenv("SKINFIT_THREADS", "1")


def test_synth_twice_identical_manifests(tmp_path):
    for d in ("a", "b"):
        assert main(["synth", "--spec", "hand3", "--count", "5", "--holdout", "1", "--points", "64",
                     "--seed", "7", "--out", str(tmp_path / d)]) == 0
    assert (tmp_path / "a/manifest.json").read_bytes() == (tmp_path / "b/manifest.json").read_bytes()


def test_unknown_flag_exit_1(capsys):
    assert main(["synth", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err


def test_unknown_subcommand_exit_1():
    assert main(["frobnicate"]) == 1


def test_train_missing_rig_names_flag(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "run")]) == 1
    assert "--rig" in capsys.readouterr().err


def test_bad_config_exit_1(tmp_path, capsys):
    (tmp_path / "c.toml").write_text("no_such_key = 1\n")
    (tmp_path / "rig.json").write_text("{}")
    assert main(["pretrain-seg", "--config", str(tmp_path / "c.toml"), "--rig", str(tmp_path / "rig.json")]) == 1
    assert "no_such_key" in capsys.readouterr().err


def test_bad_rig_exit_1(tmp_path):
    (tmp_path / "rig.json").write_text("{}")
    assert main(["pretrain-seg", "--rig", str(tmp_path / "rig.json"), "--steps", "1"]) == 1


def test_bad_thread_env_exit_1(tmp_path, monkeypatch):
    monkeypatch.setenv("SKINFIT_THREADS", "zero")
    (tmp_path / "rig.json").write_text("{}")
    assert main(["pretrain-seg", "--rig", str(tmp_path / "rig.json")]) == 1


def test_full_pipeline(tmp_path, capsys):
    data, run, cfg = tmp_path / "data", tmp_path / "run", tmp_path / "c.toml"
    cfg.write_text(TINY)
    assert main(["synth", "--spec", "chain2", "--count", "4", "--holdout", "1", "--points", "100",
                 "--out", str(data)]) == 0
    assert main(["pretrain-seg", "--rig", str(data / "rig.json"), "--config", str(cfg),
                 "--out", str(tmp_path / "seg.json")]) == 0
    assert main(["train", "--rig", str(data / "rig.json"), "--data", str(data), "--config", str(cfg),
                 "--segnet", str(tmp_path / "seg.json"), "--out", str(run), "--quiet"]) == 0
    for f in ("encoder.json", "deformer.json", "segnet.json", "rig.json", "config.toml", "runlog.csv"):
        assert (run / f).exists()
    assert len((run / "runlog.csv").read_text().splitlines()) == 4

    cloud = data / "scan_00000.ply"
    assert main(["fit", "--ckpt", str(run), "--cloud", str(cloud), "--out", str(tmp_path / "fit")]) == 0
    pose = json.loads((tmp_path / "fit/pose.json").read_text())
    assert np.asarray(pose["theta"]).shape[1] == 3
    v, f = load_mesh(tmp_path / "fit/v_d.obj")
    pts, labels = load_cloud(tmp_path / "fit/labels.ply")
    assert len(labels) == len(pts) == len(load_cloud(cloud)[0])

    capsys.readouterr()
    assert main(["eval", "--ckpt", str(run), "--data", str(data), "--pairs", "3",
                 "--out", str(tmp_path / "report.json")]) == 0
    summary = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert set(summary) == {"recon", "pose_err", "corr_err", "seg_acc"}


def test_fit_empty_cloud_exit_1(tmp_path):
    data, run, cfg = tmp_path / "data", tmp_path / "run", tmp_path / "c.toml"
    cfg.write_text(TINY + "lambda_s = 0.0\n")
    main(["synth", "--spec", "chain1", "--count", "2", "--holdout", "1", "--points", "32", "--out", str(data)])
    assert main(["train", "--rig", str(data / "rig.json"), "--data", str(data), "--config", str(cfg),
                 "--out", str(run), "--quiet"]) == 0
    (tmp_path / "empty.csv").write_text("")
    assert main(["fit", "--ckpt", str(run), "--cloud", str(tmp_path / "empty.csv")]) == 1


def test_fit_missing_checkpoint_exit_1(tmp_path):
    save_cloud(tmp_path / "c.ply", np.zeros((3, 3)))
    assert main(["fit", "--ckpt", str(tmp_path / "nope"), "--cloud", str(tmp_path / "c.ply")]) == 1


def test_gradcheck_runs(capsys):
    assert main(["gradcheck", "--instances", "2"]) == 0
    out = capsys.readouterr().out
    assert "lbs_chamfer" in out and "loopback" in out and "seg_cross_entropy" in out
