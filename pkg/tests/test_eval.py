import numpy as np
import pytest

from skinfit.eval import (
    EvalReport,
    closest_point_barycentric,
    correspondence_metric,
    joint_origins,
    pose_metric,
    project_to_mesh,
    recon_metric,
    seg_metric,
    true_surface,
)
from skinfit.rig import Skeleton, lbs_pose
from skinfit.synth import build_toy_rig, generate_scans, interpolate


def test_recon_examples():
    x = np.random.default_rng(0).normal(size=(20, 3))
    assert recon_metric(x, x) == 0.0
    assert recon_metric([[0, 0, 0]], [[1, 0, 0], [2, 0, 0]]) == pytest.approx(np.sqrt(3.5), rel=1e-15)
    vals = [recon_metric(x, x * s) for s in (1.0, 1.2, 1.5, 2.0)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def _arm():
    # root at origin with one child one unit along x
    return Skeleton(np.array([-1, 0]), np.stack([np.eye(3)] * 2), np.array([[0.0, 0, 0], [1.0, 0, 0]]),
                    -np.ones((2, 3)), np.ones((2, 3)))


def test_pose_metric_chord():
    skel = _arm()
    delta = 0.4
    hat = np.zeros((2, 3))
    hat[0, 2] = delta
    # the root origin stays put; the child moves along a chord of the unit circle
    expect = 2 * np.sin(delta / 2) / 2
    assert pose_metric(hat, np.zeros((2, 3)), skel) == pytest.approx(expect, rel=1e-12)
    assert pose_metric(hat, hat, skel) == 0.0


def test_pose_metric_twist_is_free():
    skel = _arm()
    hat = np.zeros((2, 3))
    hat[0, 0] = 0.7  # twist about the bone axis x
    hat[1] = [0.3, -0.2, 0.5]  # the leaf joint's own rotation moves no origin
    assert pose_metric(hat, np.zeros((2, 3)), skel) == pytest.approx(0.0, abs=1e-15)


def test_pose_metric_shape_mismatch():
    with pytest.raises(ValueError):
        pose_metric(np.zeros((3, 3)), np.zeros((2, 3)), _arm())


def test_joint_origins_match_rest_offsets():
    np.testing.assert_allclose(joint_origins(np.zeros((2, 3)), _arm()), [[0, 0, 0], [1, 0, 0]])


def test_seg_metric_examples():
    a = np.array([0, 1, 1, 0])
    assert seg_metric(a, a) == 1.0
    assert seg_metric(1 - a, a) == 0.0
    rng = np.random.default_rng(1)
    assert seg_metric(rng.integers(0, 4, 40000), rng.integers(0, 4, 40000)) == pytest.approx(0.25, abs=0.01)
    with pytest.raises(ValueError):
        seg_metric([0, 1], [0])


def test_closest_point_against_dense_sampling():
    rng = np.random.default_rng(2)
    for _ in range(30):
        a, b, c = rng.normal(size=(3, 3))
        p = rng.normal(size=3) * 2
        w = closest_point_barycentric(p, a, b, c)
        q = w @ np.stack([a, b, c])
        u = np.linspace(0, 1, 201)
        uu, vv = np.meshgrid(u, u)
        keep = uu + vv <= 1
        grid = (1 - uu[keep] - vv[keep])[:, None] * a + uu[keep][:, None] * b + vv[keep][:, None] * c
        assert np.linalg.norm(q - p) <= np.linalg.norm(grid - p, axis=1).min() + 1e-12
        assert np.all(w >= -1e-12) and w.sum() == pytest.approx(1.0)


def test_project_to_mesh_recovers_surface_points():
    rig = build_toy_rig("chain2").rig
    rng = np.random.default_rng(3)
    fidx = rng.integers(len(rig.faces), size=50)
    bary = rng.dirichlet([1, 1, 1], size=50)
    pts = interpolate(rig.vertices, rig.faces, fidx, bary)
    f2, b2 = project_to_mesh(pts, rig.vertices, rig.faces)
    np.testing.assert_allclose(interpolate(rig.vertices, rig.faces, f2, b2), pts, atol=1e-12)


def test_correspondence_zero_for_perfect_self_pairs():
    toy, scans = generate_scans("chain2", "uniform", 3, seed=4, n_points=100, sigma=0.0)
    rig = toy.rig
    truths = [true_surface(s, rig) for s in scans]
    err, pairs, errs = correspondence_metric(scans, truths, rig.faces, [rig], n_pairs=20, return_pairs=True)
    for (i, j), e in zip(pairs, errs):
        if i == j:
            assert e == pytest.approx(0.0, abs=1e-12)
    assert err < 1e-9


def test_correspondence_noise_floor_and_random_baseline():
    toy, scans = generate_scans("hand3", "uniform", 6, seed=5, n_points=300, sigma=0.005)
    rig = toy.rig
    truths = [true_surface(s, rig) for s in scans]
    perfect = correspondence_metric(scans, truths, rig.faces, [rig], n_pairs=30)
    assert perfect <= 3 * 0.005
    rng = np.random.default_rng(6)
    skel = rig.skeleton
    wrong = [lbs_pose(rng.uniform(skel.limits_lo, skel.limits_hi), rig.vertices, rig.weights, skel) for _ in scans]
    assert correspondence_metric(scans, wrong, rig.faces, [rig], n_pairs=30) > 5 * perfect


def test_correspondence_symmetric_on_average():
    toy, scans = generate_scans("chain3", "uniform", 4, seed=7, n_points=200, sigma=0.005)
    rig = toy.rig
    rng = np.random.default_rng(8)
    skel = rig.skeleton
    recon = [lbs_pose(np.clip(s.gt_pose + rng.normal(0, 0.1, s.gt_pose.shape), skel.limits_lo, skel.limits_hi),
                      rig.vertices, rig.weights, skel) for s in scans]
    _, pairs, errs = correspondence_metric(scans, recon, rig.faces, [rig], n_pairs=300, return_pairs=True)
    fwd = np.mean([e for (i, j), e in zip(pairs, errs) if i < j])
    bwd = np.mean([e for (i, j), e in zip(pairs, errs) if i > j])
    assert fwd == pytest.approx(bwd, rel=0.25)


def test_report_save(tmp_path):
    import json

    rep = EvalReport(0.1, 0.2, 0.3, 0.9, [{"scan": 0, "recon": 0.1, "pose_err": 0.2, "seg_acc": 0.9}])
    rep.save(tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text())["recon"] == 0.1
    assert (tmp_path / "r.csv").read_text().splitlines() == ["scan,recon,pose_err,seg_acc", "0,0.1,0.2,0.9"]


def test_evaluate_metrics_nonnegative():
    from skinfit.eval import evaluate
    from skinfit.trainer import Models, TrainConfig

    toy, scans = generate_scans("chain2", "uniform", 3, seed=9, n_points=100)
    cfg = TrainConfig(encoder_widths=(8, 16), feature=8, deformer_hidden=(16, 8), seg_widths=(8, 16))
    rep = evaluate(Models.create(toy.rig, cfg), toy.rig, scans, n_pairs=5)
    assert min(rep.recon, rep.pose_err, rep.corr_err) >= 0 and 0 <= rep.seg_acc <= 1
    assert len(rep.per_scan) == 3
