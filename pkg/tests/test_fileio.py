import numpy as np
import pytest

from skinfit.fileio import FormatError, load_cloud, load_mesh, load_toml, save_cloud, save_mesh, save_toml
from skinfit.synth import build_toy_rig


def test_mesh_roundtrip(tmp_path):
    rig = build_toy_rig("hand3").rig
    save_mesh(tmp_path / "m.obj", rig.vertices, rig.faces)
    v, f = load_mesh(tmp_path / "m.obj")
    np.testing.assert_allclose(v, rig.vertices, atol=1e-9)
    np.testing.assert_array_equal(f, rig.faces)


def test_quad_face_names_line(tmp_path):
    (tmp_path / "q.obj").write_text("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(FormatError, match=":5:"):
        load_mesh(tmp_path / "q.obj")


def test_empty_mesh_rejected(tmp_path):
    (tmp_path / "e.obj").write_text("")
    with pytest.raises(FormatError):
        load_mesh(tmp_path / "e.obj")


def test_csv_keeps_order(tmp_path):
    (tmp_path / "c.csv").write_text("3,2,1\n0,0,0\n1.5,-2,4\n")
    pts, labels = load_cloud(tmp_path / "c.csv")
    np.testing.assert_array_equal(pts, [[3, 2, 1], [0, 0, 0], [1.5, -2, 4]])
    assert labels is None


def test_csv_nan_row_reported(tmp_path):
    (tmp_path / "n.csv").write_text("0,0,0\n1,nan,0\n")
    with pytest.raises(FormatError, match="row 1"):
        load_cloud(tmp_path / "n.csv")


def test_ply_roundtrip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(100, 3))
    labels = rng.integers(0, 5, 100)
    save_cloud(tmp_path / "p.ply", pts, labels)
    back, lab = load_cloud(tmp_path / "p.ply")
    assert back.tobytes() == pts.tobytes()
    np.testing.assert_array_equal(lab, labels)
    save_cloud(tmp_path / "q.ply", pts)
    assert load_cloud(tmp_path / "q.ply")[1] is None


def test_csv_roundtrip_with_labels(tmp_path):
    pts = np.random.default_rng(1).normal(size=(5, 3))
    save_cloud(tmp_path / "p.csv", pts, [0, 1, 2, 1, 0])
    back, lab = load_cloud(tmp_path / "p.csv")
    np.testing.assert_array_equal(back, pts)
    np.testing.assert_array_equal(lab, [0, 1, 2, 1, 0])


def test_malformed_ply_header(tmp_path):
    (tmp_path / "b.ply").write_bytes(b"ply\nformat ascii 1.0\nend_header\n")
    with pytest.raises(FormatError):
        load_cloud(tmp_path / "b.ply")
    (tmp_path / "c.ply").write_bytes(b"not a ply")
    with pytest.raises(FormatError):
        load_cloud(tmp_path / "c.ply")


def test_toml_roundtrip(tmp_path):
    doc = {"lambda_s": 1.0, "encoder_widths": [64, 128], "paths": {"rig": "r.json"}}
    save_toml(tmp_path / "c.toml", doc)
    assert load_toml(tmp_path / "c.toml") == doc
    (tmp_path / "bad.toml").write_text("a = = 1")
    with pytest.raises(FormatError):
        load_toml(tmp_path / "bad.toml")
