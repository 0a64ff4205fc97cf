import warnings

import numpy as np
import pytest

from skinfit.autodiff import Adam
from skinfit.rig import partition_labels
from skinfit.segnet import (
    SegNet,
    SurfaceSampler,
    make_self_supervision,
    seg_infer,
    seg_loss_t,
    seg_train_step,
)
from skinfit.synth import build_toy_rig, face_areas, face_labels
from skinfit.trainer import TrainConfig, pretrain_segmentation


@pytest.fixture(scope="module")
def chain2():
    return build_toy_rig("chain2").rig


def test_logits_shape_any_n():
    net = SegNet(4, np.random.default_rng(0))
    for n in (1, 7, 33):
        labels, probs = seg_infer(net, np.random.default_rng(n).normal(size=(n, 3)))
        assert labels.shape == (n,) and probs.shape == (n, 4)


def test_probabilities_sum_to_one():
    net = SegNet(5, np.random.default_rng(1))
    _, probs = seg_infer(net, np.random.default_rng(2).normal(size=(50, 3)))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)


def test_permutation_equivariance_exact():
    net = SegNet(3, np.random.default_rng(3))
    x = np.random.default_rng(4).normal(size=(40, 3))
    perm = np.random.default_rng(5).permutation(40)
    lab, prob = seg_infer(net, x)
    lab_p, prob_p = seg_infer(net, x[perm])
    np.testing.assert_array_equal(lab_p, lab[perm])
    np.testing.assert_array_equal(prob_p, prob[perm])


def test_duplicate_points_identical_output():
    net = SegNet(3, np.random.default_rng(6))
    x = np.random.default_rng(7).normal(size=(10, 3))
    x = np.concatenate([x, x[:1]])
    lab, prob = seg_infer(net, x)
    assert lab[0] == lab[-1]
    np.testing.assert_array_equal(prob[0], prob[-1])


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        seg_infer(SegNet(2, np.random.default_rng(0)), np.zeros((0, 3)))


def test_initial_loss_near_log_k():
    k = 6
    net = SegNet(k, np.random.default_rng(8))
    x = np.random.default_rng(9).uniform(-0.5, 0.5, size=(4, 64, 3))
    y = np.random.default_rng(10).integers(0, k, size=(4, 64))
    loss = float(seg_loss_t(net, None, x, y).value)
    assert loss == pytest.approx(np.log(k), rel=0.05)


def test_loss_permutation_invariant():
    net = SegNet(3, np.random.default_rng(11))
    rng = np.random.default_rng(12)
    x, y = rng.normal(size=(2, 30, 3)), rng.integers(0, 3, size=(2, 30))
    perm = rng.permutation(30)
    a = float(seg_loss_t(net, None, x, y).value)
    b = float(seg_loss_t(net, None, x[:, perm], y[:, perm]).value)
    assert a == pytest.approx(b, rel=1e-14)


def test_label_out_of_range_rejected():
    net = SegNet(3, np.random.default_rng(0))
    with pytest.raises(ValueError):
        seg_train_step(net, Adam(1e-3), np.zeros((1, 2, 3)), np.array([[0, 3]]))


def test_overfit_one_batch_non_increasing(chain2):
    rng = np.random.default_rng(13)
    skel = chain2.skeleton
    theta = rng.uniform(skel.limits_lo, skel.limits_hi, size=(4, skel.joint_count, 3))
    x, y = make_self_supervision(chain2, chain2.vertices, theta, np.zeros((4, 3)), 128, rng)
    net = SegNet(chain2.part_count, np.random.default_rng(14))
    opt = Adam(1e-3)
    losses = [seg_train_step(net, opt, x, y) for _ in range(100)]
    for prev, cur in zip(losses, losses[1:]):
        assert cur <= prev * 1.05
    assert losses[-1] < losses[0]


def test_rest_pose_samples_labelled_by_partition(chain2):
    rng = np.random.default_rng(15)
    j = chain2.joint_count
    x, y = make_self_supervision(chain2, chain2.vertices, np.zeros((1, j, 3)), np.zeros((1, 3)), 200, rng)
    vert_labels = partition_labels(chain2.weights, chain2.merge_map)
    np.testing.assert_array_equal(chain2.labels, vert_labels)
    assert set(np.unique(y)) <= set(vert_labels)


def test_labels_depend_only_on_weights(chain2):
    j = chain2.joint_count
    theta = np.full((1, j, 3), 0.1).clip(chain2.skeleton.limits_lo, chain2.skeleton.limits_hi)
    moved = chain2.vertices * 1.1
    xa, ya = make_self_supervision(chain2, chain2.vertices, theta, np.zeros((1, 3)), 100, np.random.default_rng(16))
    xb, yb = make_self_supervision(chain2, moved, theta, np.zeros((1, 3)), 100, np.random.default_rng(16))
    np.testing.assert_array_equal(ya, yb)
    assert not np.allclose(xa, xb)


def test_label_histogram_matches_area_fractions():
    rig = build_toy_rig("hand3").rig
    sampler = SurfaceSampler(rig)
    rng = np.random.default_rng(17)
    _, y = sampler.sample(rig.vertices[None], 40000, rng)
    areas = face_areas(rig.vertices, rig.faces)
    fl = face_labels(rig.labels, rig.faces)
    expect = np.bincount(fl, weights=areas, minlength=rig.part_count) / areas.sum()
    got = np.bincount(y[0], minlength=rig.part_count) / y.size
    np.testing.assert_allclose(got, expect, atol=0.05 * expect.max())
    assert np.all(np.abs(got - expect) <= 0.05 * expect + 3e-3)


def test_round_trip_label_matches_source_face():
    rig = build_toy_rig("chain3").rig
    fl = face_labels(rig.labels, rig.faces)
    # majority vote of the three vertex labels, ties to the lowest label
    for f, lab in zip(rig.faces, fl):
        counts = np.bincount(rig.labels[f], minlength=rig.part_count)
        assert lab == np.argmax(counts)


def test_out_of_limit_pose_clamped_with_warning(chain2):
    j = chain2.joint_count
    theta = np.full((1, j, 3), 5.0)
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        make_self_supervision(chain2, chain2.vertices, theta, np.zeros((1, 3)), 10, np.random.default_rng(0))
    assert any("clamping" in str(x.message) for x in w)


def test_pretraining_reaches_95_percent_on_two_part_chain(chain2):
    assert chain2.part_count == 2
    config = TrainConfig(pretrain_steps=300, batch_size=4, selfsup_points=256, seed=0)
    _, acc = pretrain_segmentation(chain2, config)
    assert acc >= 0.95
