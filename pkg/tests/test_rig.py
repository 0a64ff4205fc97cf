import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from skinfit import synth
from skinfit.rig import (
    Rig,
    RigError,
    Skeleton,
    clamp_pose,
    joint_positions,
    joint_transforms,
    lbs_pose,
    lbs_pose_batch,
    lbs_pose_t,
    load_rig,
    normalize_weights,
    partition_labels,
    rig_from_dict,
    rig_to_dict,
    save_rig,
)


def _rz(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])


def _rx(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0, 0], [0, c, -s], [0, s, c]])


def _ry(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1.0, 0], [-s, 0, c]])


def _h(r, t):
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = t
    return m


def chain_skeleton(n, offset=(1.0, 0.0, 0.0), lim=np.pi):
    off = np.array([(0.0, 0.0, 0.0)] + [offset] * (n - 1))
    return Skeleton(list(range(-1, n - 1)), np.tile(np.eye(3), (n, 1, 1)), off,
                    -lim * np.ones((n, 3)), lim * np.ones((n, 3)))


def test_zero_pose_gives_composed_rest_offsets():
    skel = chain_skeleton(3)
    g = joint_transforms(np.zeros((3, 3)), skel)
    for j in range(3):
        np.testing.assert_allclose(g[j], _h(np.eye(3), (float(j), 0, 0)), atol=0)


def test_single_joint_rotation_about_z():
    skel = chain_skeleton(1)
    g = joint_transforms(np.array([[0, 0, np.pi / 2]]), skel)
    np.testing.assert_allclose(g[0], _h(_rz(np.pi / 2), np.zeros(3)), atol=1e-15)


def test_three_joint_chain_hand_composed():
    skel = chain_skeleton(3)
    pose = np.zeros((3, 3))
    pose[1] = (0, 0, np.pi / 2)
    g = joint_transforms(pose, skel)
    # oracle: explicit product of local 4x4 matrices
    local = [_h(np.eye(3), (0, 0, 0)), _h(_rz(np.pi / 2), (1, 0, 0)), _h(np.eye(3), (1, 0, 0))]
    world = local[0] @ local[1] @ local[2]
    np.testing.assert_allclose(g[2], world, atol=1e-15)
    np.testing.assert_allclose(g[2][:3, 3], (1, 1, 0), atol=1e-15)


def test_euler_convention_is_rz_ry_rx():
    skel = chain_skeleton(1)
    a = np.array([0.3, -0.7, 1.1])
    g = joint_transforms(a[None], skel)
    np.testing.assert_allclose(g[0][:3, :3], _rz(a[2]) @ _ry(a[1]) @ _rx(a[0]), atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_joint_transforms_are_rigid(seed):
    rng = np.random.default_rng(seed)
    skel = synth.build_toy_rig("hand3").rig.skeleton
    pose = rng.uniform(-3, 3, size=(skel.joint_count, 3))
    for g in joint_transforms(pose, skel):
        r = g[:3, :3]
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(r) - 1.0) < 1e-12
        np.testing.assert_array_equal(g[3], (0, 0, 0, 1))


def test_non_finite_pose_rejected():
    skel = chain_skeleton(2)
    pose = np.zeros((2, 3))
    pose[1, 0] = np.nan
    with pytest.raises(ValueError):
        joint_transforms(pose, skel)
    with pytest.raises(ValueError):
        joint_transforms(np.zeros((3, 3)), skel)


def test_lbs_rest_identity_exact_for_presets():
    for name in synth.PRESETS:
        rig = synth.build_toy_rig(name).rig
        out = lbs_pose(np.zeros((rig.joint_count, 3)), rig.vertices, rig.weights, rig.skeleton)
        assert np.abs(out - rig.vertices).max() <= 1e-12


def test_lbs_single_joint_rigid_rotation():
    skel = chain_skeleton(1)
    out = lbs_pose(np.array([[0, 0, np.pi / 2]]), np.array([[1.0, 0, 0]]), np.ones((1, 1)), skel)
    np.testing.assert_allclose(out, [[0, 1, 0]], atol=1e-15)


def test_lbs_half_blend_is_matrix_blend():
    # child at the root origin, rotated by pi about z
    skel = Skeleton([-1, 0], np.tile(np.eye(3), (2, 1, 1)), np.zeros((2, 3)),
                    -4 * np.ones((2, 3)), 4 * np.ones((2, 3)))
    u = np.array([[0.3, -0.2, 0.5]])
    pose = np.array([[0, 0, 0], [0, 0, np.pi]])
    out = lbs_pose(pose, u, np.array([[0.5, 0.5]]), skel)
    expect = 0.5 * (u[0] + _rz(np.pi) @ u[0])
    np.testing.assert_allclose(out[0], expect, atol=1e-15)


def test_lbs_shape_mismatch():
    skel = chain_skeleton(2)
    with pytest.raises(ValueError):
        lbs_pose(np.zeros((2, 3)), np.zeros((3, 3)), np.ones((4, 2)) / 2, skel)


def test_rigid_equivariance_under_root_rotation():
    rig = synth.build_toy_rig("hand3").rig
    skel = rig.skeleton
    a = np.array([0.2, -0.1, 0.25])
    pose = np.zeros((rig.joint_count, 3))
    pose[skel.root] = a
    out = lbs_pose(pose, rig.vertices, rig.weights, skel)
    root = skel.rest_world[skel.root]
    r = _rz(a[2]) @ _ry(a[1]) @ _rx(a[0])
    expect = (rig.vertices - root[:3, 3]) @ r.T + root[:3, 3]
    np.testing.assert_allclose(out, expect, atol=1e-9)


def test_weight_row_scaling_invariance():
    rng = np.random.default_rng(3)
    rig = synth.build_toy_rig("chain3").rig
    pose = rng.uniform(rig.skeleton.limits_lo, rig.skeleton.limits_hi)
    scaled = rig.weights * rng.uniform(0.5, 3.0, size=(len(rig.weights), 1))
    a = lbs_pose(pose, rig.vertices, rig.weights, rig.skeleton)
    b = lbs_pose(pose, rig.vertices, normalize_weights(scaled), rig.skeleton)
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_translation_shifts_everything():
    rig = synth.build_toy_rig("hand3").rig
    t = np.array([0.01, -0.02, 0.03])
    pose = np.zeros((rig.joint_count, 3))
    out = lbs_pose(pose, rig.vertices, rig.weights, rig.skeleton, t)
    np.testing.assert_allclose(out, rig.vertices + t, atol=1e-15)
    np.testing.assert_allclose(joint_positions(pose, rig.skeleton, t), rig.skeleton.rest_world[:, :3, 3] + t, atol=1e-15)


def test_tape_lbs_matches_numpy():
    rng = np.random.default_rng(0)
    rig = synth.build_toy_rig("hand3").rig
    skel = rig.skeleton
    theta = rng.uniform(skel.limits_lo, skel.limits_hi, size=(3, skel.joint_count, 3))
    trans = rng.uniform(-0.03, 0.03, size=(3, 3))
    a = lbs_pose_t(theta, rig.vertices, rig.weights, skel, trans).value
    b = lbs_pose_batch(theta, rig.vertices, rig.weights, skel, trans)
    np.testing.assert_allclose(a, b, atol=1e-14)


def test_partition_labels_examples():
    assert list(partition_labels(np.eye(3))) == [0, 1, 2]
    assert partition_labels(np.array([[0.6, 0.4]]))[0] == 0
    assert partition_labels(np.array([[0.5, 0.5]]))[0] == 0
    assert partition_labels(np.array([[0.2, 0.8]]), [3, 1])[0] == 1


def test_clamp_pose_examples():
    skel = chain_skeleton(1, lim=1.0)
    inside = np.array([[0.1, -0.2, 0.3]])
    np.testing.assert_array_equal(clamp_pose(inside, skel), inside)
    np.testing.assert_array_equal(clamp_pose([[2.0, -3.0, 0.0]], skel), [[1.0, -1.0, 0.0]])


def test_weights_normalised_and_nonnegative():
    with pytest.raises(ValueError):
        normalize_weights([[0.5, -0.1]])
    with pytest.raises(ValueError):
        normalize_weights([[0.0, 0.0]])
    w = normalize_weights([[2.0, 2.0], [1.0, 3.0]])
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def _tiny_rig_dict():
    return {
        "joints": [
            {"name": "a", "parent": -1, "rest_rotation": [1, 0, 0, 0], "rest_translation": [0, 0, 0],
             "limits_lo": [-1, -1, -1], "limits_hi": [1, 1, 1]},
            {"name": "b", "parent": "a", "rest_rotation": [1, 0, 0, 0], "rest_translation": [0, 0.5, 0],
             "limits_lo": [0, 0, 0], "limits_hi": [1, 0, 0]},
        ],
        "weights": [[2, 0], [1, 1], [0, 3]],
        "template": {"vertices": [[0, 0, 0], [0, 0.5, 0], [0.1, 0.9, 0]], "faces": [[0, 1, 2]]},
    }


def test_rig_validation_errors():
    doc = _tiny_rig_dict()
    rig = rig_from_dict(doc)
    np.testing.assert_allclose(rig.weights.sum(1), 1.0)
    bad = _tiny_rig_dict()
    bad["template"]["faces"] = [[0, 1, 1]]
    with pytest.raises(RigError, match="degenerate"):
        rig_from_dict(bad)
    bad = _tiny_rig_dict()
    bad["template"]["vertices"][2] = [0, 1.5, 0]
    with pytest.raises(RigError, match=r"\[-1, 1\]"):
        rig_from_dict(bad)
    bad = _tiny_rig_dict()
    bad["joints"][0]["parent"] = 1
    with pytest.raises(RigError, match="root"):
        rig_from_dict(bad)
    bad = _tiny_rig_dict()
    bad["joints"][1]["limits_lo"] = [2, 0, 0]
    with pytest.raises(RigError, match=r"joints\[1\]"):
        rig_from_dict(bad)
    bad = _tiny_rig_dict()
    del bad["weights"]
    with pytest.raises(RigError, match="weights"):
        rig_from_dict(bad)


def test_cycle_rejected():
    with pytest.raises(RigError, match="cycle"):
        Skeleton([-1, 2, 1], np.tile(np.eye(3), (3, 1, 1)), np.zeros((3, 3)), np.zeros((3, 3)), np.zeros((3, 3)))


def test_rig_file_roundtrip(tmp_path):
    rig = synth.build_toy_rig("hand3").rig
    save_rig(rig, tmp_path / "rig.json")
    back = load_rig(tmp_path / "rig.json")
    np.testing.assert_array_equal(back.vertices, rig.vertices)
    np.testing.assert_array_equal(back.faces, rig.faces)
    np.testing.assert_allclose(back.weights, rig.weights, atol=1e-15)
    np.testing.assert_allclose(back.skeleton.rest_rot, rig.skeleton.rest_rot, atol=1e-15)
    np.testing.assert_array_equal(back.labels, rig.labels)
    assert rig_to_dict(back) == json.loads((tmp_path / "rig.json").read_text())


def test_rig_file_errors_name_location(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{"joints": [\n  1,\n')
    with pytest.raises(RigError, match="line"):
        load_rig(p)
    doc = _tiny_rig_dict()
    doc["joints"][1]["rest_translation"] = [0, 1]
    p.write_text(json.dumps(doc))
    with pytest.raises(RigError, match=r"broken.json.*joints\[1\]\.rest_translation"):
        load_rig(p)


def test_rig_rejects_weight_column_mismatch():
    skel = chain_skeleton(2)
    with pytest.raises(RigError):
        Rig(skel, np.ones((3, 3)), np.zeros((3, 3)), np.array([[0, 1, 2]]))
